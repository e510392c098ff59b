//! Binary model files.
//!
//! Layout: magic `HCFSLN1`, a version byte, a little-endian `u32` length and
//! that many bytes of `key=value` header text, then per parameter its name,
//! trainable flag, rank and dims, then the scaler, then every parameter value
//! as little-endian `f64` in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::Scaler;
use crate::encoder::{EncoderConfig, ModalityConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"HCFSLN1";
pub const VERSION: u8 = 1;

/// How the training pool was carved out of the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitInfo {
    pub seed: u64,
    pub test_fraction: f64,
}

fn header_text(model: &ModelParams, split: &SplitInfo) -> String {
    let c = &model.config;
    let mods: Vec<String> = c.modalities.iter().map(|m| format!("{}:{}", m.name, m.input_dim)).collect();
    let seq_len = c.modalities.first().map_or(0, |m| m.seq_len);
    let mut out = String::new();
    for (k, v) in [
        ("modalities", mods.join(",")),
        ("seq_len", seq_len.to_string()),
        ("embed_dim", c.encoder.embed_dim.to_string()),
        ("heads", c.encoder.heads.to_string()),
        ("dropout", c.encoder.dropout.to_string()),
        ("pool", c.encoder.pool.to_string()),
        ("ln_eps", c.encoder.ln_eps.to_string()),
        ("alpha_init", c.alpha_init.to_string()),
        ("alpha_trainable", c.alpha_trainable.to_string()),
        ("geometry", c.geometry.to_string()),
        ("split_seed", split.seed.to_string()),
        ("test_fraction", split.test_fraction.to_string()),
    ] {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_model(model: &ModelParams, split: &SplitInfo, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let header = header_text(model, split);
    put_u32(&mut w, header.len())?;
    w.write_all(header.as_bytes())?;
    let entries = model.store.entries();
    put_u32(&mut w, entries.len())?;
    for e in entries {
        put_u32(&mut w, e.name.len())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.trainable as u8])?;
        put_u32(&mut w, e.value.rank())?;
        for &d in e.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    match &model.scaler {
        Some(s) => {
            w.write_all(&[1])?;
            put_u32(&mut w, s.mean.len())?;
            put_f64s(&mut w, &s.mean)?;
            put_f64s(&mut w, &s.std)?;
        }
        None => w.write_all(&[0])?,
    }
    for e in entries {
        put_f64s(&mut w, e.value.data())?;
    }
    w.flush()
}

pub fn save_model(model: &ModelParams, split: &SplitInfo, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, split, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("model blob truncated: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Format("model blob has non-UTF-8 text".into()))
    }
}

fn header_field<'a>(header: &'a [(String, String)], key: &str) -> Result<&'a str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("model header is missing `{key}`")))
}

fn parse_field<T: std::str::FromStr>(header: &[(String, String)], key: &str) -> Result<T> {
    let raw = header_field(header, key)?;
    raw.parse()
        .map_err(|_| Error::Format(format!("model header `{key}` has bad value {raw:?}")))
}

fn config_from_header(header: &[(String, String)]) -> Result<(ModelConfig, SplitInfo)> {
    let seq_len: usize = parse_field(header, "seq_len")?;
    let modalities = header_field(header, "modalities")?
        .split(',')
        .map(|part| {
            let (name, d) = part
                .rsplit_once(':')
                .ok_or_else(|| Error::Format(format!("model header modality {part:?} is not name:dim")))?;
            let d = d
                .parse()
                .map_err(|_| Error::Format(format!("model header modality {part:?} has a bad width")))?;
            ModalityConfig::new(name, d, seq_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let enc = |e: Error| Error::Format(format!("model header: {e}"));
    let config = ModelConfig {
        modalities,
        encoder: EncoderConfig {
            embed_dim: parse_field(header, "embed_dim")?,
            heads: parse_field(header, "heads")?,
            dropout: parse_field(header, "dropout")?,
            pool: header_field(header, "pool")?.parse().map_err(enc)?,
            ln_eps: parse_field(header, "ln_eps")?,
        },
        alpha_init: parse_field(header, "alpha_init")?,
        alpha_trainable: parse_field(header, "alpha_trainable")?,
        geometry: header_field(header, "geometry")?.parse().map_err(enc)?,
    };
    let split = SplitInfo {
        seed: parse_field(header, "split_seed")?,
        test_fraction: parse_field(header, "test_fraction")?,
    };
    Ok((config, split))
}

pub fn read_model(r: impl Read) -> Result<(ModelParams, SplitInfo)> {
    let mut r = Reader { inner: r };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a model blob (bad magic)".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("model blob version {version}, expected {VERSION}")));
    }
    let text = r.string()?;
    let header: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let (config, split) = config_from_header(&header)?;
    let mut model = ModelParams::init(config, 0).map_err(|e| Error::Format(format!("model header: {e}")))?;

    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "model blob has {count} parameters, configuration implies {}",
            model.store.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for e in model.store.entries_mut() {
        let name = r.string()?;
        if name != e.name {
            return Err(Error::Format(format!("model blob parameter {name:?}, expected {:?}", e.name)));
        }
        e.trainable = r.u8()? != 0;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    model.scaler = match r.u8()? {
        0 => None,
        _ => {
            let d = r.u32()?;
            Some(Scaler {
                mean: r.f64s(d)?,
                std: r.f64s(d)?,
            })
        }
    };
    let values = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, r.f64s(n)?)
        })
        .collect::<Result<Vec<_>>>()?;
    model.store.load_values(values)?;
    if !model.store.all_finite() {
        return Err(Error::Format("model blob contains non-finite weights".into()));
    }
    Ok((model, split))
}

pub fn load_model(path: &Path) -> Result<(ModelParams, SplitInfo)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(file))
}
