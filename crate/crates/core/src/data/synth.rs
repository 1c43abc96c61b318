//! Synthetic live/spoof face stand-ins.
//!
//! A live image is a smooth, low-frequency pattern whose colour and layout
//! depend on the subject; sessions shift brightness and datasets shift the
//! tint. A spoof image is the live image of the same (subject, session,
//! frame) plus a high-frequency grating whose frequency and orientation
//! identify the attack type. Per-pixel noise is shared by every image of a
//! cell, so live and spoof differ only by the overlay unless `image_noise`
//! adds independent per-image noise. Raising either noise level or lowering
//! `overlay_amplitude` makes the task harder.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng;

use super::image::write_image;
use super::manifest::{write_manifest, AttackType, ManifestRecord};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: u32,
    pub sessions: u8,
    /// Images per (subject, session, attack type), live included.
    pub frames: u32,
    pub attacks: Vec<AttackType>,
    pub datasets: Vec<String>,
    pub image_side: usize,
    /// Half-width of the uniform per-pixel noise shared by all images of a
    /// (subject, session, frame) cell.
    pub noise: f64,
    /// Half-width of extra uniform noise drawn independently per image.
    pub image_noise: f64,
    /// Peak amplitude of the attack grating; each image draws a factor in
    /// `[overlay_min_factor, 1]` of it.
    pub overlay_amplitude: f64,
    pub overlay_min_factor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 20,
            sessions: 3,
            frames: 1,
            attacks: vec![AttackType::Print, AttackType::Replay],
            datasets: vec!["synth".into()],
            image_side: 24,
            noise: 0.04,
            image_noise: 0.05,
            overlay_amplitude: 0.3,
            overlay_min_factor: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.sessions == 0 || self.frames == 0 {
            return Err(Error::Config(
                "subjects, sessions and frames must be positive".into(),
            ));
        }
        if self.image_side < 4 {
            return Err(Error::Config("image_side must be at least 4".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("at least one dataset id is required".into()));
        }
        if self.attacks.contains(&AttackType::None) {
            return Err(Error::Config("`none` is not an attack type".into()));
        }
        let mut attacks = self.attacks.clone();
        attacks.sort();
        attacks.dedup();
        if attacks.len() != self.attacks.len() {
            return Err(Error::Config("attack types must be distinct".into()));
        }
        if !(0.0..=1.0).contains(&self.overlay_min_factor)
            || self.noise < 0.0
            || self.image_noise < 0.0
            || self.overlay_amplitude < 0.0
        {
            return Err(Error::Config(
                "noise and overlay settings out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn num_records(&self) -> usize {
        self.datasets.len()
            * self.subjects as usize
            * self.sessions as usize
            * self.frames as usize
            * (1 + self.attacks.len())
    }
}

/// (cycles per pixel, orientation in radians, vertical band or whole image)
fn overlay_style(attack: AttackType) -> (f64, f64, Option<(f64, f64)>) {
    match attack {
        AttackType::None => (0.0, 0.0, None),
        AttackType::Print => (0.30, 0.0, None),
        AttackType::Replay => (0.25, PI / 2.0, None),
        AttackType::FlexibleMask => (0.22, PI / 4.0, None),
        AttackType::PaperMask => (0.20, PI / 3.0, None),
        AttackType::RigidMask => (0.28, 3.0 * PI / 4.0, None),
        AttackType::FakeHead => (0.18, PI / 6.0, None),
        AttackType::Glasses => (0.30, 0.0, Some((0.25, 0.5))),
    }
}

fn attack_index(attack: AttackType) -> u64 {
    attack as u64
}

pub fn record_path(
    dataset: &str,
    subject: u32,
    session: u8,
    attack: AttackType,
    frame: u32,
) -> String {
    format!("{dataset}/s{subject:03}/sess{session}/{attack}_{frame}.fasi")
}

/// The image for one record, computed without touching the filesystem.
pub fn render(
    cfg: &SynthConfig,
    dataset_index: usize,
    subject: u32,
    session: u8,
    attack: AttackType,
    frame: u32,
) -> Image {
    let side = cfg.image_side;
    let s = side as f64;
    let ds = dataset_index as u64;

    let mut subj = rng::stream(cfg.seed, &[1, ds, subject as u64]);
    let base: [f64; 3] = std::array::from_fn(|_| subj.gen_range(0.3..0.65));
    let blob_sigma = subj.gen_range(0.18..0.3) * s;
    let wave_theta = subj.gen_range(0.0..PI);
    let wave_phase = subj.gen_range(0.0..2.0 * PI);

    let mut domain = rng::stream(cfg.seed, &[2, ds]);
    let tint: [f64; 3] = std::array::from_fn(|_| domain.gen_range(-0.06..0.06));
    let brightness = (session as f64 - 2.0) * 0.06;

    let mut cell = rng::stream(
        cfg.seed,
        &[3, ds, subject as u64, session as u64, frame as u64],
    );
    let cx = s / 2.0 + cell.gen_range(-0.08..0.08) * s;
    let cy = s / 2.0 + cell.gen_range(-0.08..0.08) * s;
    let noise: Vec<f64> = (0..CHANNELS * side * side)
        .map(|_| {
            if cfg.noise > 0.0 {
                cell.gen_range(-cfg.noise..=cfg.noise)
            } else {
                0.0
            }
        })
        .collect();

    let mut pa = rng::stream(
        cfg.seed,
        &[
            4,
            ds,
            subject as u64,
            session as u64,
            frame as u64,
            attack_index(attack),
        ],
    );
    let (freq, theta, band) = overlay_style(attack);
    let amp = cfg.overlay_amplitude * pa.gen_range(cfg.overlay_min_factor..=1.0);
    let phase = pa.gen_range(0.0..2.0 * PI);
    let channel_gain: [f64; 3] = std::array::from_fn(|_| pa.gen_range(0.7..1.0));
    let image_noise: Vec<f64> = (0..CHANNELS * side * side)
        .map(|_| {
            if cfg.image_noise > 0.0 {
                pa.gen_range(-cfg.image_noise..=cfg.image_noise)
            } else {
                0.0
            }
        })
        .collect();

    let mut img = Image::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let r2 = (fx - cx).powi(2) + (fy - cy).powi(2);
            let blob = 0.18 * (-r2 / (2.0 * blob_sigma * blob_sigma)).exp();
            let wave = 0.05
                * (2.0 * PI * (fx * wave_theta.cos() + fy * wave_theta.sin()) / s + wave_phase)
                    .sin();
            let in_band = band.map_or(true, |(lo, hi)| fy >= lo * s && fy < hi * s);
            let grating = if attack != AttackType::None && in_band {
                amp * (2.0 * PI * freq * (fx * theta.cos() + fy * theta.sin()) + phase).sin()
            } else {
                0.0
            };
            for c in 0..CHANNELS {
                let v = base[c]
                    + tint[c]
                    + brightness
                    + blob
                    + wave
                    + noise[(c * side + y) * side + x]
                    + image_noise[(c * side + y) * side + x]
                    + grating * channel_gain[c];
                img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    dataset: usize,
    subject: u32,
    session: u8,
    attack: AttackType,
    frame: u32,
}

fn cells(cfg: &SynthConfig) -> Vec<Cell> {
    let mut out = Vec::with_capacity(cfg.num_records());
    for dataset in 0..cfg.datasets.len() {
        for subject in 1..=cfg.subjects {
            for session in 1..=cfg.sessions {
                for attack in std::iter::once(AttackType::None).chain(cfg.attacks.iter().copied()) {
                    for frame in 0..cfg.frames {
                        out.push(Cell {
                            dataset,
                            subject,
                            session,
                            attack,
                            frame,
                        });
                    }
                }
            }
        }
    }
    out
}

fn cell_record(cfg: &SynthConfig, c: Cell) -> ManifestRecord {
    let dataset = &cfg.datasets[c.dataset];
    ManifestRecord {
        path: record_path(dataset, c.subject, c.session, c.attack, c.frame),
        subject_id: c.subject,
        session: c.session,
        label: c.attack.label(),
        attack_type: c.attack,
        dataset_id: dataset.clone(),
    }
}

/// Records in generation order, without writing anything.
pub fn synthetic_records(cfg: &SynthConfig) -> Vec<ManifestRecord> {
    cells(cfg)
        .into_iter()
        .map(|c| cell_record(cfg, c))
        .collect()
}

/// Write every image plus `manifest.txt` under `out_dir`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.num_records());
    for c in cells(cfg) {
        let record = cell_record(cfg, c);
        let img = render(cfg, c.dataset, c.subject, c.session, c.attack, c.frame);
        let path = out_dir.join(&record.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_image(&path, &img)?;
        records.push(record);
    }
    let comment = format!(
        "synthetic seed={} subjects={} sessions={} frames={} noise={} image_noise={} overlay_amplitude={} overlay_min_factor={}",
        cfg.seed,
        cfg.subjects,
        cfg.sessions,
        cfg.frames,
        cfg.noise,
        cfg.image_noise,
        cfg.overlay_amplitude,
        cfg.overlay_min_factor
    );
    write_manifest(&records, &out_dir.join(MANIFEST_FILE), &[comment])?;
    Ok(records)
}

/// Mean squared 4-neighbour Laplacian over interior pixels, summed over channels.
pub fn high_frequency_energy(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for c in 0..CHANNELS {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let lap = 4.0 * img.get(c, y, x) as f64
                    - img.get(c, y - 1, x) as f64
                    - img.get(c, y + 1, x) as f64
                    - img.get(c, y, x - 1) as f64
                    - img.get(c, y, x + 1) as f64;
                acc += lap * lap;
            }
        }
    }
    acc / ((w - 2) * (h - 2)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_request() {
        let cfg = SynthConfig {
            subjects: 10,
            ..SynthConfig::default()
        };
        assert_eq!(synthetic_records(&cfg).len(), 90);
        assert_eq!(cfg.num_records(), 90);
    }

    #[test]
    fn spoof_has_more_high_frequency_energy() {
        let cfg = SynthConfig {
            attacks: AttackType::ATTACKS.to_vec(),
            image_noise: 0.0,
            overlay_min_factor: 0.5,
            ..SynthConfig::default()
        };
        for subject in 1..=cfg.subjects {
            for session in 1..=cfg.sessions {
                let live =
                    high_frequency_energy(&render(&cfg, 0, subject, session, AttackType::None, 0));
                for attack in AttackType::ATTACKS {
                    let spoof =
                        high_frequency_energy(&render(&cfg, 0, subject, session, attack, 0));
                    assert!(
                        spoof > live,
                        "{attack} s{subject} sess{session}: {spoof} <= {live}"
                    );
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(
            render(&cfg, 0, 3, 2, AttackType::Replay, 0),
            render(&cfg, 0, 3, 2, AttackType::Replay, 0)
        );
        assert_ne!(
            render(&cfg, 0, 3, 2, AttackType::Replay, 0),
            render(
                &SynthConfig { seed: 1, ..cfg },
                0,
                3,
                2,
                AttackType::Replay,
                0
            )
        );
    }

    #[test]
    fn rejects_none_as_attack() {
        let cfg = SynthConfig {
            attacks: vec![AttackType::None],
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
