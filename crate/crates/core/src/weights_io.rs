//! Flat binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFW1"  u64 config digest  u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, rank × u32 dims,
//!             product(dims) × f32
//! ```
//!
//! First-pass tensors are stored under their plain names; second-pass
//! tensors carry the `second_pass.` prefix.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::cascade::CascadeWeights;
use crate::config::{digest_of, CascadeConfig, EncoderConfig};
use crate::conformer::{EncoderWeights, Tensors};
use crate::error::{Error, Result};
use crate::numerics::Real;

pub const MAGIC: &[u8; 4] = b"SFW1";
pub const SECOND_PASS_PREFIX: &str = "second_pass";

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

/// Digest stored in the header for an encoder with an optional second pass.
pub fn container_digest(cfg: &EncoderConfig, cascade: Option<&CascadeConfig>) -> u64 {
    match cascade {
        None => cfg.digest(),
        Some(c) => digest_of(&(cfg, c)),
    }
}

/// Writes every tensor of `parts`, each under its prefix.
pub fn write_tensors<T: Real>(
    mut out: impl Write,
    digest: u64,
    parts: &[(&str, &dyn Tensors<T>)],
) -> Result<()> {
    let mut count = 0u32;
    for (prefix, p) in parts {
        p.visit(prefix, &mut |_, _, _| count += 1);
    }
    out.write_all(MAGIC)?;
    out.write_all(&digest.to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    let mut result = Ok(());
    for (prefix, p) in parts {
        p.visit(prefix, &mut |name, dims, data| {
            if result.is_ok() {
                result = write_one(&mut out, name, dims, data);
            }
        });
    }
    result?;
    out.flush()?;
    Ok(())
}

fn write_one<T: Real>(out: &mut impl Write, name: &str, dims: &[usize], data: &[T]) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * data.len());
    for v in data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Stored {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Container(format!("truncated while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_all(mut input: impl Read) -> Result<(u64, BTreeMap<String, Stored>)> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}")));
    }
    let mut d = [0u8; 8];
    read_exact(&mut input, &mut d, "digest")?;
    let digest = u64::from_le_bytes(d);
    let count = read_u32(&mut input, "tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut input, "name length")? as usize;
        if len > MAX_NAME {
            return Err(Error::Container(format!("tensor name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut input, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input, "rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Container(format!("{name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut input, "dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&n| n <= usize::MAX / 4)
            .ok_or_else(|| Error::Container(format!("{name}: size overflows")))?;
        let mut bytes = vec![0u8; 4 * n];
        read_exact(&mut input, &mut bytes, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors
            .insert(name.clone(), Stored { dims, data })
            .is_some()
        {
            return Err(Error::Container(format!("duplicate tensor {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Container("trailing bytes after last tensor".into()));
    }
    Ok((digest, tensors))
}

/// Fills `parts` from a container. The digest must equal `digest` and the
/// container must hold exactly the expected tensors with matching dims.
pub fn read_tensors<T: Real>(
    input: impl Read,
    digest: u64,
    parts: &mut [(&str, &mut dyn Tensors<T>)],
) -> Result<()> {
    let (found, mut stored) = read_all(input)?;
    if found != digest {
        return Err(Error::Container(format!(
            "config digest {found:016x} does not match expected {digest:016x}"
        )));
    }
    let mut result = Ok(());
    for (prefix, p) in parts.iter_mut() {
        p.visit_mut(prefix, &mut |name, dims, data| {
            if result.is_err() {
                return;
            }
            result = match stored.remove(name) {
                None => Err(Error::Container(format!("missing tensor {name}"))),
                Some(s) if s.dims != dims => Err(Error::Container(format!(
                    "{name}: stored dims {:?}, expected {dims:?}",
                    s.dims
                ))),
                Some(s) => {
                    for (v, &f) in data.iter_mut().zip(&s.data) {
                        *v = T::of(f as f64);
                    }
                    Ok(())
                }
            };
        });
    }
    result?;
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Container(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Saves encoder weights, plus second-pass weights when given.
pub fn save_weights<T: Real>(
    path: impl AsRef<Path>,
    weights: &EncoderWeights<T>,
    cfg: &EncoderConfig,
    cascade: Option<(&CascadeWeights<T>, &CascadeConfig)>,
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let digest = container_digest(cfg, cascade.map(|c| c.1));
    let mut parts: Vec<(&str, &dyn Tensors<T>)> = vec![("", weights)];
    if let Some((cw, _)) = cascade {
        parts.push((SECOND_PASS_PREFIX, cw));
    }
    write_tensors(file, digest, &parts)
}

/// Loads weights written by [`save_weights`] for the same configs.
pub fn load_weights<T: Real>(
    path: impl AsRef<Path>,
    cfg: &EncoderConfig,
    cascade: Option<&CascadeConfig>,
) -> Result<(EncoderWeights<T>, Option<CascadeWeights<T>>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut enc = EncoderWeights::zeros(cfg)?;
    let mut cas = cascade.map(CascadeWeights::zeros).transpose()?;
    let digest = container_digest(cfg, cascade);
    let mut parts: Vec<(&str, &mut dyn Tensors<T>)> = vec![("", &mut enc)];
    if let Some(c) = cas.as_mut() {
        parts.push((SECOND_PASS_PREFIX, c));
    }
    read_tensors(file, digest, &mut parts)?;
    Ok((enc, cas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::init_cascade_weights;
    use crate::config::AttentionKind;
    use crate::conformer::init_weights;
    use crate::numerics::Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            model_dim: 8,
            total_blocks: 2,
            conv_only_blocks: 1,
            heads: 2,
            conv_kernel: 3,
            attn_left_context: 2,
            attention_kind: AttentionKind::Performer,
            ..EncoderConfig::default()
        }
    }

    fn bytes_of(w: &EncoderWeights<f64>, digest: u64) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, digest, &[("", w as &dyn Tensors<f64>)]).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = cfg();
        let ccfg = CascadeConfig {
            model_dim: 12,
            heads: 2,
            blocks: 2,
            ..CascadeConfig::for_first_pass(8)
        };
        let w = init_weights::<f64>(&cfg, &mut Rng::new(1)).unwrap();
        let cw = init_cascade_weights::<f64>(&ccfg, &mut Rng::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfw");
        save_weights(&path, &w, &cfg, Some((&cw, &ccfg))).unwrap();
        let (w2, cw2) = load_weights::<f64>(&path, &cfg, Some(&ccfg)).unwrap();
        assert_eq!(w2, w);
        assert_eq!(cw2.unwrap(), cw);
        assert!(load_weights::<f64>(&path, &cfg, None).is_err());

        let w32 = init_weights::<f32>(&cfg, &mut Rng::new(1)).unwrap();
        save_weights(&path, &w32, &cfg, None).unwrap();
        let (back, none) = load_weights::<f32>(&path, &cfg, None).unwrap();
        assert!(none.is_none());
        assert_eq!(back, w32);
    }

    #[test]
    fn header_layout() {
        let cfg = cfg();
        let w = init_weights::<f64>(&cfg, &mut Rng::new(1)).unwrap();
        let buf = bytes_of(&w, 0xABCD);
        assert_eq!(&buf[..4], b"SFW1");
        assert_eq!(u64::from_le_bytes(buf[4..12].try_into().unwrap()), 0xABCD);
        let mut n = 0;
        w.visit("", &mut |_, _, _| n += 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), n);
        let name_len = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        assert_eq!(&buf[20..20 + name_len], b"frontend");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = cfg();
        let w = init_weights::<f64>(&cfg, &mut Rng::new(1)).unwrap();
        let digest = cfg.digest();
        let good = bytes_of(&w, digest);
        let load = |bytes: &[u8]| {
            let mut z = EncoderWeights::<f64>::zeros(&cfg).unwrap();
            read_tensors(bytes, digest, &mut [("", &mut z as &mut dyn Tensors<f64>)])
        };
        assert!(load(&good).is_ok());
        assert!(matches!(
            load(&good[..good.len() - 3]),
            Err(Error::Container(_))
        ));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(load(&bad).is_err());
        assert!(load(&bytes_of(&w, digest ^ 1)).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(load(&extra).is_err());

        let other = EncoderConfig {
            conv_kernel: 5,
            ..cfg.clone()
        };
        let w5 = init_weights::<f64>(&other, &mut Rng::new(1)).unwrap();
        let mut z = EncoderWeights::<f64>::zeros(&cfg).unwrap();
        let err = read_tensors(
            &bytes_of(&w5, digest)[..],
            digest,
            &mut [("", &mut z as &mut dyn Tensors<f64>)],
        );
        assert!(matches!(err, Err(Error::Container(m)) if m.contains("depthwise")));
    }
}
