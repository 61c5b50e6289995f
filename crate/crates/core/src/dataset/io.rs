//! On-disk layout: one 8-bit grayscale PNG per image plus `manifest.csv`.
//!
//! The manifest is authoritative for labels and split tags; the PNG contents
//! are verified against the recorded SHA-256 on load. A small `dataset.meta`
//! sidecar keeps the generator seed so that a reloaded dataset compares equal.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use defectda_tensor::par;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{validate_domain, DomainDataset, LabeledImage, Split};
use crate::error::{io_err, Error, Result};

pub const MANIFEST_HEADER: &str = "filename,domain,class,split,sha256";
const MANIFEST: &str = "manifest.csv";
const META: &str = "dataset.meta";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub filename: String,
    pub domain: u8,
    pub class: u8,
    pub split: Split,
    pub sha256: String,
}

impl ManifestRow {
    fn to_line(&self) -> String {
        format!("{},{},{},{},{}", self.filename, self.domain, self.class, self.split, self.sha256)
    }
}

pub fn file_name(domain: u8, class: u8, index: usize) -> String {
    format!("{domain}_{class}_{index:05}.png")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(img: &Array2<f32>) -> Vec<u8> {
    let (h, w) = img.dim();
    let data: Vec<u8> = img.iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&data).expect("in-memory png data");
    }
    out
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let png_err = |msg: String| Error::Png { path: path.to_path_buf(), msg };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!(
            "expected 8-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f32> = buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Array2::from_shape_vec((h, w), data).expect("png buffer size"))
}

/// Writes the dataset into `dir` (created if needed).
pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let encoded = par::map_range(par::default_exec(), ds.images.len(), |i| encode_png(&ds.images[i].pixels));
    let mut lines = vec![MANIFEST_HEADER.to_string()];
    for (im, bytes) in ds.images.iter().zip(&encoded) {
        let name = file_name(im.domain, im.label, im.index);
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        let row = ManifestRow {
            filename: name,
            domain: im.domain,
            class: im.label,
            split: im.split,
            sha256: sha256_hex(bytes),
        };
        lines.push(row.to_line());
    }
    write_atomic(&dir.join(MANIFEST), &(lines.join("\n") + "\n"))?;
    let meta = format!("domain = {}\nseed = {}\nside = {}\n", ds.domain, ds.seed, ds.side);
    write_atomic(&dir.join(META), &meta)
}

pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, msg: String| Error::Manifest {
        path: path.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => return Err(bad(1, format!("expected header {MANIFEST_HEADER:?}, got {other:?}"))),
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let ln = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad(ln, format!("expected 5 fields, got {}", f.len())));
        }
        let domain: u8 = f[1].parse().map_err(|_| bad(ln, format!("bad domain {:?}", f[1])))?;
        validate_domain(domain).map_err(|e| bad(ln, e.to_string()))?;
        let class: u8 = f[2].parse().map_err(|_| bad(ln, format!("bad class {:?}", f[2])))?;
        if class > 1 {
            return Err(bad(ln, format!("class must be 0 or 1, got {class}")));
        }
        let split: Split = f[3].parse().map_err(|e: Error| bad(ln, e.to_string()))?;
        if f[4].len() != 64 || !f[4].bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad(ln, format!("bad sha256 {:?}", f[4])));
        }
        rows.push(ManifestRow {
            filename: f[0].to_string(),
            domain,
            class,
            split,
            sha256: f[4].to_ascii_lowercase(),
        });
    }
    Ok(rows)
}

fn read_meta(dir: &Path) -> Option<u64> {
    let text = fs::read_to_string(dir.join(META)).ok()?;
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == "seed").then(|| v.trim().parse().ok()).flatten()
    })
}

fn index_from_name(name: &str) -> Option<usize> {
    let stem = name.strip_suffix(".png")?;
    stem.rsplit('_').next()?.parse().ok()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            out.push(p);
        }
    }
    Ok(out)
}

/// Loads and validates a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let rows = read_manifest(dir)?;
    let manifest_err = |msg: String| Error::Manifest { path: dir.join(MANIFEST), msg };
    let n_files = png_files(dir)?.len();
    if rows.len() != n_files {
        return Err(manifest_err(format!(
            "{} manifest rows but {} png files",
            rows.len(),
            n_files
        )));
    }
    let Some(first) = rows.first() else {
        return Err(manifest_err("manifest lists no images".into()));
    };
    let domain = first.domain;
    if let Some(r) = rows.iter().find(|r| r.domain != domain) {
        return Err(manifest_err(format!("{} belongs to domain {}, expected {domain}", r.filename, r.domain)));
    }
    let mut images = Vec::with_capacity(rows.len());
    let mut side = None;
    for (k, row) in rows.iter().enumerate() {
        let path = dir.join(&row.filename);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != row.sha256 {
            return Err(Error::Checksum(row.filename.clone()));
        }
        let pixels = decode_png(&bytes, &path)?;
        let s = pixels.nrows();
        if pixels.ncols() != s || *side.get_or_insert(s) != s {
            return Err(manifest_err(format!("{} has inconsistent shape {:?}", row.filename, pixels.dim())));
        }
        images.push(LabeledImage {
            pixels,
            label: row.class,
            domain,
            split: row.split,
            index: index_from_name(&row.filename).unwrap_or(k),
        });
    }
    let side = side.unwrap_or(0);
    super::validate_side(side)?;
    Ok(DomainDataset { domain, seed: read_meta(dir).unwrap_or(0), side, images })
}
