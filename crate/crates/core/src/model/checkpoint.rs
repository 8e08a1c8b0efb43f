//! Checkpoint file layout (all little-endian):
//!
//! ```text
//! "MMTW"  u32 version
//! u32 text_input_dim  u32 image_input_dim  u32 embed_dim
//! u32 hidden_count    u32 hidden_width * hidden_count
//! u64 seed            f64 temperature
//! f64 * len(param)    for each parameter in declaration order
//! ```

use std::path::Path;

use super::{EncoderConfig, TwoTowerModel};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMTW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &TwoTowerModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(c.text_input_dim as u32);
    w.u32(c.image_input_dim as u32);
    w.u32(c.embed_dim as u32);
    w.u32(c.hidden_widths.len() as u32);
    for &h in &c.hidden_widths {
        w.u32(h as u32);
    }
    w.u64(c.seed);
    w.f64(model.temperature);
    for p in model.parameters() {
        w.f64s(p.data());
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TwoTowerModel> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let text_input_dim = r.u32("text_input_dim")? as usize;
    let image_input_dim = r.u32("image_input_dim")? as usize;
    let embed_dim = r.u32("embed_dim")? as usize;
    let at = r.offset();
    let hidden_count = r.u32("hidden_count")? as usize;
    if hidden_count > 1024 {
        return Err(Error::format(at, format!("implausible hidden layer count {hidden_count}")));
    }
    let mut hidden_widths = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        hidden_widths.push(r.u32("hidden width")? as usize);
    }
    let seed = r.u64("seed")?;
    let at_temp = r.offset();
    let temperature = r.f64("temperature")?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::format(at_temp, format!("temperature must be positive, got {temperature}")));
    }
    let config = EncoderConfig {
        text_input_dim,
        image_input_dim,
        hidden_widths,
        embed_dim,
        seed,
    };
    let at = r.offset();
    config
        .validate()
        .map_err(|e| Error::format(at, format!("invalid encoder header: {e}")))?;
    let needed = parameter_count(&config).saturating_mul(8);
    if needed != r.remaining() as u128 {
        return Err(Error::format(
            at,
            format!("header implies {needed} bytes of parameters, {} remain", r.remaining()),
        ));
    }
    // Fix the shapes from the config, then overwrite the values.
    let mut model = TwoTowerModel::new(config)?;
    model.temperature = temperature;
    for p in model.parameters_mut() {
        let vals = r.finite_f64s(p.len(), "parameter data")?;
        p.data_mut().copy_from_slice(&vals);
    }
    r.finish()?;
    Ok(model)
}

fn parameter_count(c: &EncoderConfig) -> u128 {
    let d = c.embed_dim as u128;
    let tower = |input: usize| {
        let mut fan_in = input as u128;
        let mut n: u128 = 0;
        for &w in &c.hidden_widths {
            n = n.saturating_add((fan_in.saturating_add(1)).saturating_mul(w as u128));
            fan_in = w as u128;
        }
        n.saturating_add(2u128.saturating_mul(fan_in.saturating_add(1)).saturating_mul(d))
    };
    tower(c.text_input_dim).saturating_add(tower(c.image_input_dim))
}

pub fn save_checkpoint(model: &TwoTowerModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TwoTowerModel> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TwoTowerModel {
        TwoTowerModel::new(EncoderConfig {
            text_input_dim: 5,
            image_input_dim: 3,
            hidden_widths: vec![6],
            embed_dim: 4,
            seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        m.temperature = 0.123;
        m.text.shared_head.bias.data_mut()[1] = -0.5;
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], b"MMTW");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode_checkpoint(&model());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));

        for cut in [0, 3, 7, 20, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: expected format error, got {other:?}"),
            }
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format { .. })));

        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Format { offset: 4, .. })));
    }
}
