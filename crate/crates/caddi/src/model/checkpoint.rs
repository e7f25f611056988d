//! Checkpoint file format.
//!
//! Layout: magic `CADDI1\0`, one version byte, a length-prefixed `key=value`
//! config text block, then every parameter tensor in declaration order as a
//! little-endian u64 element count followed by row-major little-endian f32
//! values. Extra key=value pairs (vocabulary, schedule horizon, sampler
//! defaults) ride along in the config block.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, Parameters};

const MAGIC: &[u8; 7] = b"CADDI1\0";
const VERSION: u8 = 1;

pub fn save_checkpoint(
    params: &Parameters,
    config: &ModelConfig,
    extra: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;

    let mut text = String::new();
    text.push_str(&format!("n_layers={}\n", config.n_layers));
    text.push_str(&format!("d_model={}\n", config.d_model));
    text.push_str(&format!("n_heads={}\n", config.n_heads));
    text.push_str(&format!("seq_rotary_dims={}\n", config.seq_rotary_dims));
    text.push_str(&format!("time_rotary_dims={}\n", config.time_rotary_dims));
    text.push_str(&format!("seq_rotary_base={}\n", config.seq_rotary_base));
    text.push_str(&format!("time_rotary_base={}\n", config.time_rotary_base));
    text.push_str(&format!("vocab_augmented={}\n", config.vocab_augmented));
    text.push_str(&format!("max_positions={}\n", config.max_positions));
    text.push_str(&format!("max_timesteps={}\n", config.max_timesteps));
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;

    for slice in params.slices() {
        w.write_all(&(slice.len() as u64).to_le_bytes())?;
        for &v in slice {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::UnexpectedEof
        } else {
            ModelError::Io(e)
        }
    })
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn parse_config(
    text: &str,
) -> Result<(ModelConfig, BTreeMap<String, String>), ModelError> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::BadConfig(format!("bad config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let mut take = |key: &str| {
        map.remove(key).ok_or_else(|| ModelError::BadConfig(format!("missing key {key}")))
    };
    let usize_of = |key: &str, v: String| {
        v.parse::<usize>().map_err(|_| ModelError::BadConfig(format!("bad value for {key}: {v}")))
    };
    let f64_of = |key: &str, v: String| {
        v.parse::<f64>().map_err(|_| ModelError::BadConfig(format!("bad value for {key}: {v}")))
    };
    let config = ModelConfig {
        n_layers: usize_of("n_layers", take("n_layers")?)?,
        d_model: usize_of("d_model", take("d_model")?)?,
        n_heads: usize_of("n_heads", take("n_heads")?)?,
        seq_rotary_dims: usize_of("seq_rotary_dims", take("seq_rotary_dims")?)?,
        time_rotary_dims: usize_of("time_rotary_dims", take("time_rotary_dims")?)?,
        seq_rotary_base: f64_of("seq_rotary_base", take("seq_rotary_base")?)?,
        time_rotary_base: f64_of("time_rotary_base", take("time_rotary_base")?)?,
        vocab_augmented: usize_of("vocab_augmented", take("vocab_augmented")?)?,
        max_positions: usize_of("max_positions", take("max_positions")?)?,
        max_timesteps: usize_of("max_timesteps", take("max_timesteps")?)?,
    };
    Ok((config, map))
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(Parameters, ModelConfig, BTreeMap<String, String>), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version)?;
    if version[0] != VERSION {
        return Err(ModelError::UnsupportedVersion(version[0]));
    }
    let text_len = read_u64(&mut r)? as usize;
    let mut text = vec![0u8; text_len];
    read_exact(&mut r, &mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| ModelError::BadConfig("config block is not UTF-8".into()))?;
    let (config, extra) = parse_config(&text)?;
    config.validate()?;

    let mut params = Parameters::zeros(&config);
    let meta = params.meta();
    for (slice, m) in params.slices_mut().into_iter().zip(meta) {
        let count = read_u64(&mut r)? as usize;
        if count != m.len {
            return Err(ModelError::ShapeMismatch { name: m.name, found: count, expected: m.len });
        }
        let mut buf = vec![0u8; count * 4];
        read_exact(&mut r, &mut buf)?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            slice[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    Ok((params, config, extra))
}
