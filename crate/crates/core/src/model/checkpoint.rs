//! Parameter blobs with a plain-text descriptor.
//!
//! `weights.bin` holds every parameter then every buffer, in module order:
//! a magic line, a little-endian `u64` tensor count, and per tensor its rank,
//! dims and `f64` values. `model.txt` records `arch_name`, `input_side` and
//! `checksum`.

use std::fs;
use std::path::Path;

use defectda_tensor::{Elem, ndarray::{ArrayD, IxDyn}};

use super::layers::Module;
use crate::dataset::io::write_atomic;
use crate::error::{io_err, Error, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DESCRIPTOR_FILE: &str = "model.txt";
const MAGIC: &[u8] = b"DEFECTDA-WEIGHTS-1\n";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub arch_name: String,
    pub input_side: usize,
    pub checksum: String,
}

impl Descriptor {
    pub fn to_text(&self) -> String {
        format!(
            "arch_name = {}\ninput_side = {}\nchecksum = {}\n",
            self.arch_name, self.input_side, self.checksum
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut arch, mut side, mut sum) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed descriptor line {line:?}")))?;
            let v = v.trim().to_string();
            match k.trim() {
                "arch_name" => arch = Some(v),
                "input_side" => {
                    side = Some(v.parse().map_err(|_| Error::Checkpoint(format!("bad input_side {v:?}")))?)
                }
                "checksum" => sum = Some(v),
                other => return Err(Error::Checkpoint(format!("unknown descriptor key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Checkpoint(format!("descriptor missing {k}"));
        Ok(Descriptor {
            arch_name: arch.ok_or_else(|| missing("arch_name"))?,
            input_side: side.ok_or_else(|| missing("input_side"))?,
            checksum: sum.ok_or_else(|| missing("checksum"))?,
        })
    }
}

fn tensors<T: Elem>(m: &dyn Module<T>) -> Vec<ArrayD<T>> {
    let mut v: Vec<ArrayD<T>> = m.params().iter().map(|p| p.value().clone()).collect();
    v.extend(m.buffers().iter().map(|b| b.value().clone()));
    v
}

fn encode<T: Elem>(ts: &[ArrayD<T>]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((ts.len() as u64).to_le_bytes());
    for t in ts {
        out.extend((t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &x in t.iter() {
            out.extend(x.as_f64().to_le_bytes());
        }
    }
    out
}

fn decode<T: Elem>(bytes: &[u8]) -> Result<Vec<ArrayD<T>>> {
    let bad = || Error::Checkpoint("truncated or corrupt weights blob".into());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| Error::Checkpoint("bad weights magic".into()))?;
    let mut words = rest.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
    if rest.len() % 8 != 0 {
        return Err(bad());
    }
    let mut next_u = || words.next().map(|w| u64::from_le_bytes(w) as usize).ok_or_else(bad);
    let n = next_u()?;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let rank = next_u()?;
        let shape = (0..rank).map(|_| next_u()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| next_u().map(|b| T::of(f64::from_bits(b as u64))))
            .collect::<Result<Vec<_>>>()?;
        out.push(ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad())?);
    }
    if next_u().is_ok() {
        return Err(Error::Checkpoint("trailing bytes in weights blob".into()));
    }
    Ok(out)
}

pub fn save<T: Elem>(m: &dyn Module<T>, dir: &Path, arch_name: &str, input_side: usize) -> Result<Descriptor> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let weights = dir.join(WEIGHTS_FILE);
    let tmp = weights.with_extension("tmp");
    fs::write(&tmp, encode(&tensors(m))).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &weights).map_err(io_err(&weights))?;
    let desc = Descriptor { arch_name: arch_name.to_string(), input_side, checksum: m.checksum() };
    write_atomic(&dir.join(DESCRIPTOR_FILE), &desc.to_text())?;
    Ok(desc)
}

pub fn read_descriptor(dir: &Path) -> Result<Descriptor> {
    let path = dir.join(DESCRIPTOR_FILE);
    Descriptor::parse(&fs::read_to_string(&path).map_err(io_err(&path))?)
}

/// Loads weights into an already-built module of the same shape and verifies
/// the descriptor checksum. The module is left untouched on error.
pub fn load<T: Elem>(m: &dyn Module<T>, dir: &Path, arch_name: &str, input_side: usize) -> Result<Descriptor> {
    let desc = read_descriptor(dir)?;
    if desc.arch_name != arch_name || desc.input_side != input_side {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {} at side {}, expected {arch_name} at side {input_side}",
            desc.arch_name, desc.input_side
        )));
    }
    let path = dir.join(WEIGHTS_FILE);
    let loaded = decode::<T>(&fs::read(&path).map_err(io_err(&path))?)?;
    let current = tensors(m);
    if loaded.len() != current.len() || loaded.iter().zip(&current).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Checkpoint("weights do not match the module layout".into()));
    }
    let snapshot = super::layers::Snapshot::take(m);
    let (params, buffers) = (m.params(), m.buffers());
    let mut it = loaded.into_iter();
    for p in &params {
        p.set_value(it.next().unwrap());
    }
    for b in &buffers {
        b.set_value(it.next().unwrap());
    }
    if m.checksum() != desc.checksum {
        snapshot.restore(m);
        return Err(Error::Checksum(format!("checkpoint {} failed checksum verification", dir.display())));
    }
    Ok(desc)
}
