//! Image files: `FASI` magic, u32 LE width, u32 LE height, then
//! interleaved 8-bit RGB rows top to bottom.

use std::path::Path;

use crate::augment::{Image, CHANNELS};
use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};

use super::ManifestRecord;

pub const IMAGE_MAGIC: &[u8; 4] = b"FASI";
const HEADER_LEN: usize = 12;

pub fn encode_image(img: &Image) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(HEADER_LEN + CHANNELS * w * h);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out.push(quantize(img.get(c, y, x)));
            }
        }
    }
    out
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let corrupt = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != IMAGE_MAGIC {
        return Err(corrupt("missing FASI image header".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(CHANNELS))
        .ok_or_else(|| corrupt(format!("image size {w}x{h} overflows")))?;
    let pixels = &bytes[HEADER_LEN..];
    if pixels.len() != expected {
        return Err(corrupt(format!(
            "{w}x{h} image needs {expected} pixel bytes, file has {}",
            pixels.len()
        )));
    }
    let mut img = Image::filled(w, h, 0.0);
    for (i, px) in pixels.chunks_exact(CHANNELS).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            img.set(c, i / w, i % w, b as f32 / 255.0);
        }
    }
    Ok(img)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Load a record's image (relative to `root`) as a (1, 3, H, W) tensor in [0, 1].
pub fn load_image<T: Element>(root: &Path, record: &ManifestRecord) -> Result<Tensor<T>> {
    Ok(read_image(&root.join(&record.path))?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_image_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("b.fasi"), &Image::filled(4, 3, 0.0)).unwrap();
        let record = ManifestRecord {
            path: "b.fasi".into(),
            subject_id: 1,
            session: 1,
            label: super::super::Label::Live,
            attack_type: super::super::AttackType::None,
            dataset_id: "d".into(),
        };
        let t: Tensor<f32> = load_image(dir.path(), &record).unwrap();
        assert_eq!(t.shape(), [1, 3, 3, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_exact_on_quantized_values() {
        let data: Vec<f32> = (0..3 * 5 * 2).map(|i| (i * 8) as f32 / 255.0).collect();
        let img = Image::new(5, 2, data).unwrap();
        let back = decode_image(&encode_image(&img), Path::new("x")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut bytes = encode_image(&Image::filled(2, 2, 0.5));
        bytes.pop();
        assert!(decode_image(&bytes, Path::new("x")).is_err());
        assert!(decode_image(b"PNG", Path::new("x")).is_err());
    }
}
