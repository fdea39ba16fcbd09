//! Checkpoint archives: a single binary container holding a format-version
//! string, a JSON metadata blob (configs, fingerprints), and named f64
//! tensors serialized bit-exactly in little-endian order. Writes go through
//! a temp file and an atomic rename.

use crate::autodiff::ArrD;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LATRAY\x00\x01";
pub const GAN_FORMAT: &str = "latentray-gan-v1";
pub const ENCODER_FORMAT: &str = "latentray-encoder-v1";

struct Archive {
    format: String,
    meta: String,
    tensors: Vec<(String, ArrD)>,
}

fn write_bytes(out: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    out.write_all(&(bytes.len() as u32).to_le_bytes())?;
    out.write_all(bytes)
}

fn read_len(inp: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    inp.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_string(inp: &mut impl Read) -> Result<String> {
    let len = read_len(inp)?;
    let mut buf = vec![0u8; len];
    inp.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf-8 in archive".into()))
}

fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        write_bytes(&mut out, archive.format.as_bytes())?;
        write_bytes(&mut out, archive.meta.as_bytes())?;
        out.write_all(&(archive.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &archive.tensors {
            write_bytes(&mut out, name.as_bytes())?;
            let shape = tensor.shape();
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            let std_layout = tensor.as_standard_layout();
            for v in std_layout.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_archive(path: &Path, expected_format: &str) -> Result<Archive> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a latentray checkpoint (bad magic)".into()));
    }
    let format = read_string(&mut inp)?;
    if format != expected_format {
        return Err(Error::Format(format!(
            "checkpoint format '{format}' does not match expected '{expected_format}'"
        )));
    }
    let meta = read_string(&mut inp)?;
    let count = read_len(&mut inp)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut inp)?;
        let ndim = read_len(&mut inp)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            inp.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            inp.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((
            name,
            ArrD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Format(format!("bad tensor shape in archive: {e}")))?,
        ));
    }
    Ok(Archive {
        format,
        meta,
        tensors,
    })
}

fn named_params(set: &crate::nn::ParamSet) -> Vec<(String, ArrD)> {
    set.named()
        .iter()
        .map(|(n, t)| (n.clone(), t.to_array()))
        .collect()
}

fn restore_params(set: &crate::nn::ParamSet, tensors: &[(String, ArrD)], prefix: &str) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &ArrD> = tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
        .collect();
    if lookup.len() != set.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors under '{prefix}', model needs {}",
            lookup.len(),
            set.len()
        )));
    }
    for (name, param) in set.named() {
        let stored = lookup
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{prefix}{name}'")))?;
        if stored.shape() != param.value().shape() {
            return Err(Error::Format(format!(
                "tensor '{prefix}{name}' has shape {:?}, model expects {:?}",
                stored.shape(),
                param.value().shape()
            )));
        }
        param.update_value(|v| v.assign(stored));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
}

/// Save generator + discriminator + constant noise maps as one archive.
pub fn save_gan(generator: &Generator, discriminator: &Discriminator, path: &Path) -> Result<()> {
    let meta = serde_json::to_string(&GanMeta {
        generator: generator.config.clone(),
        discriminator: discriminator.config.clone(),
    })
    .expect("config serialization cannot fail");
    let mut tensors = Vec::new();
    for (n, t) in named_params(generator.params()) {
        tensors.push((format!("gen.{n}"), t));
    }
    for (n, t) in named_params(discriminator.params()) {
        tensors.push((format!("disc.{n}"), t));
    }
    for (i, m) in generator.noise_maps().into_iter().enumerate() {
        tensors.push((format!("noise.{i}"), m));
    }
    write_archive(
        path,
        &Archive {
            format: GAN_FORMAT.to_string(),
            meta,
            tensors,
        },
    )
}

/// Load a GAN checkpoint, reproducing parameters and noise maps bit-exactly.
pub fn load_gan(path: &Path) -> Result<(Generator, Discriminator)> {
    let archive = read_archive(path, GAN_FORMAT)?;
    let meta: GanMeta = serde_json::from_str(&archive.meta)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let mut generator = Generator::init(meta.generator, 0)?;
    let discriminator = Discriminator::init(meta.discriminator, 0)?;
    restore_params(generator.params(), &archive.tensors, "gen.")?;
    restore_params(discriminator.params(), &archive.tensors, "disc.")?;
    let mut noise: Vec<(usize, ArrD)> = archive
        .tensors
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix("noise.")
                .and_then(|s| s.parse::<usize>().ok())
                .map(|i| (i, t.clone()))
        })
        .collect();
    noise.sort_by_key(|(i, _)| *i);
    generator.set_noise_maps(noise.into_iter().map(|(_, t)| t).collect())?;
    Ok((generator, discriminator))
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    encoder: EncoderConfig,
    /// Fingerprint of the generator checkpoint this encoder was trained
    /// against.
    generator_fingerprint: String,
}

pub fn save_encoder(encoder: &Encoder, generator_fingerprint: &str, path: &Path) -> Result<()> {
    let meta = serde_json::to_string(&EncoderMeta {
        encoder: encoder.config.clone(),
        generator_fingerprint: generator_fingerprint.to_string(),
    })
    .expect("config serialization cannot fail");
    let tensors = named_params(encoder.params())
        .into_iter()
        .map(|(n, t)| (format!("enc.{n}"), t))
        .collect();
    write_archive(
        path,
        &Archive {
            format: ENCODER_FORMAT.to_string(),
            meta,
            tensors,
        },
    )
}

/// Load an encoder checkpoint; returns the encoder and the fingerprint of
/// the generator it was trained against.
pub fn load_encoder(path: &Path) -> Result<(Encoder, String)> {
    let archive = read_archive(path, ENCODER_FORMAT)?;
    let meta: EncoderMeta = serde_json::from_str(&archive.meta)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let encoder = Encoder::init(meta.encoder, 0)?;
    restore_params(encoder.params(), &archive.tensors, "enc.")?;
    Ok((encoder, meta.generator_fingerprint))
}
