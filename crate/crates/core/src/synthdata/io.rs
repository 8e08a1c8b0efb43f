//! Dataset file layout (all little-endian):
//!
//! ```text
//! "MMDS"  u32 version=1  u64 N  u32 D_T  u32 D_V  u32 C
//! f64 * N*D_T   text rows
//! f64 * N*D_V   image rows
//! u32 * N       labels
//! ```
//!
//! The generator config travels next to it as JSON in `<basename>.meta`.

use std::path::{Path, PathBuf};

use super::{GenConfig, PairedDataset};
use crate::autodiff::Tensor;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MMDS";
pub const DATASET_VERSION: u32 = 1;

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn encode_dataset(d: &PairedDataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u64(d.len() as u64);
    w.u32(d.text.cols() as u32);
    w.u32(d.image.cols() as u32);
    w.u32(d.num_classes as u32);
    w.f64s(d.text.data());
    w.f64s(d.image.data());
    for &l in &d.labels {
        w.u32(l as u32);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PairedDataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported dataset version {version}")));
    }
    let n = r.u64("sample count")?;
    let dt = r.u32("text dimension")? as u64;
    let dv = r.u32("image dimension")? as u64;
    let at = r.offset();
    let c = r.u32("class count")? as usize;
    let needed = n as u128 * (dt as u128 + dv as u128) * 8 + n as u128 * 4;
    if needed != r.remaining() as u128 {
        return Err(Error::format(
            r.offset(),
            format!("header implies {needed} payload bytes, {} remain", r.remaining()),
        ));
    }
    if c == 0 {
        return Err(Error::format(at, "class count is zero"));
    }
    let (n, dt, dv) = (n as usize, dt as usize, dv as usize);
    let text = r.finite_f64s(n * dt, "text rows")?;
    let image = r.finite_f64s(n * dv, "image rows")?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let l = r.u32("label")? as usize;
        if l >= c {
            return Err(Error::format(at, format!("label {l} outside [0, {c})")));
        }
        labels.push(l);
    }
    r.finish()?;
    Ok(PairedDataset {
        text: Tensor::matrix(n, dt, text)?,
        image: Tensor::matrix(n, dv, image)?,
        labels,
        num_classes: c,
        provenance: None,
    })
}

/// Writes the binary file and, when the dataset carries one, its `.meta` sidecar.
pub fn save_dataset(d: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    d.validate()?;
    std::fs::write(path, encode_dataset(d))?;
    if let Some(cfg) = &d.provenance {
        let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(meta_path(path), json + "\n")?;
    }
    Ok(())
}

/// Reads a dataset and its sidecar (if present).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let path = path.as_ref();
    let mut d = decode_dataset(&std::fs::read(path)?)?;
    let meta = meta_path(path);
    if meta.exists() {
        let text = std::fs::read_to_string(&meta)?;
        let cfg: GenConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("bad sidecar {}: {e}", meta.display())))?;
        d.provenance = Some(cfg);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    fn small() -> PairedDataset {
        generate(&GenConfig {
            num_samples: 9,
            num_classes: 3,
            text_dim: 5,
            image_dim: 4,
            shared_strength: 0.5,
            text_strength: 1.0,
            image_strength: 0.3,
            noise_std: 0.2,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mmds");
        let d = small();
        save_dataset(&d, &path).unwrap();
        assert!(meta_path(&path).exists());
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let bytes = encode_dataset(&small());
        for cut in [0, 2, 4, 10, 27, 28, bytes.len() - 1] {
            assert!(
                matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })),
                "cut at {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        match decode_dataset(&bad) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, 0);
                assert!(detail.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut label = bytes;
        let last = label.len() - 4;
        label[last..].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_dataset(&label), Err(Error::Format { .. })));
    }
}
