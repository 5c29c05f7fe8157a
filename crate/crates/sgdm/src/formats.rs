//! On-disk formats: run-length masks, the dataset and feature containers,
//! atomic file replacement and PNG export.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sgdm_core::annotation::{Mask, Rect};
use sgdm_core::Image;

use crate::datasets::{AnnotatedImage, Dataset, ShapeInstance, ShapeKind, ShapesConfig};
use crate::error::{Error, Result};

pub const DATA_MAGIC: &[u8; 12] = b"SGDM-DATA-v1";
pub const FEAT_MAGIC: &[u8; 12] = b"SGDM-FEAT-v1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Binary mask stored as alternating run lengths over the flattened data,
/// starting with a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

pub fn rle_encode(mask: &Mask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for &v in &mask.data {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    RleMask { channels: mask.channels, height: mask.height, width: mask.width, runs }
}

pub fn rle_decode(rle: &RleMask) -> Result<Mask> {
    let total = rle.channels * rle.height * rle.width;
    let mut data = Vec::with_capacity(total);
    for (i, &r) in rle.runs.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    if data.len() != total {
        return Err(Error::Format(format!("run lengths cover {} pixels, mask has {total}", data.len())));
    }
    Ok(Mask { channels: rle.channels, height: rle.height, width: rle.width, data })
}

/// Writes via a temporary sibling file and a rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&tmp, e))?;
    w.get_ref().sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_magic(r: &mut impl Read, magic: &[u8; 12], path: &Path) -> Result<()> {
    let mut buf = [0u8; 12];
    r.read_exact(&mut buf).map_err(|e| truncated(path, e))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "{}: bad magic, expected \"{}\"",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn truncated(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("{}: truncated file", path.display()))
    } else {
        Error::io(path, e)
    }
}

pub(crate) fn write_blob(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LE>(bytes.len() as u64)?;
    w.write_all(bytes)
}

pub(crate) fn read_blob(r: &mut impl Read, limit: u64) -> std::io::Result<Vec<u8>> {
    let len = r.read_u64::<LE>()?;
    if len > limit {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "length field exceeds file size"));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn write_f32s(w: &mut impl Write, xs: &[f32]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LE>(&mut out)?;
    Ok(out)
}

fn write_rle(w: &mut impl Write, m: &Mask) -> std::io::Result<()> {
    let rle = rle_encode(m);
    for d in [rle.channels, rle.height, rle.width, rle.runs.len()] {
        w.write_u32::<LE>(d as u32)?;
    }
    rle.runs.iter().try_for_each(|&r| w.write_u32::<LE>(r))
}

fn read_rle(r: &mut impl Read, limit: u64) -> std::io::Result<RleMask> {
    let mut dims = [0u32; 4];
    r.read_u32_into::<LE>(&mut dims)?;
    if dims[3] as u64 * 4 > limit {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "run count exceeds file size"));
    }
    let mut runs = vec![0u32; dims[3] as usize];
    r.read_u32_into::<LE>(&mut runs)?;
    Ok(RleMask { channels: dims[0] as usize, height: dims[1] as usize, width: dims[2] as usize, runs })
}

fn kind_code(k: ShapeKind) -> u8 {
    match k {
        ShapeKind::Circle => 0,
        ShapeKind::Square => 1,
        ShapeKind::Triangle => 2,
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    save_dataset_with_echo(dataset, path, &serde_json::Value::Null)
}

/// Like [`save_dataset`], also recording the generating experiment config.
pub fn save_dataset_with_echo(dataset: &Dataset, path: &Path, echo: &serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&serde_json::json!({ "version": VERSION, "config": dataset.config, "echo": echo }))?;
    write_atomic(path, |w| {
        w.write_all(DATA_MAGIC)?;
        write_blob(w, &header)?;
        w.write_u64::<LE>(dataset.images.len() as u64)?;
        for img in &dataset.images {
            w.write_u64::<LE>(img.id)?;
            for d in [img.pixels.channels, img.pixels.height, img.pixels.width] {
                w.write_u32::<LE>(d as u32)?;
            }
            write_f32s(w, &img.pixels.data)?;
            w.write_u32::<LE>(img.shapes.len() as u32)?;
            for s in &img.shapes {
                w.write_u32::<LE>(s.class as u32)?;
                w.write_u8(kind_code(s.kind))?;
                for v in [s.rect.y0, s.rect.y1, s.rect.x0, s.rect.x1] {
                    w.write_u32::<LE>(v as u32)?;
                }
            }
            write_rle(w, &img.segmentation)?;
        }
        Ok(())
    })
}

#[derive(Deserialize)]
struct DataHeader {
    config: ShapesConfig,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let limit = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    read_magic(&mut r, DATA_MAGIC, path)?;
    let t = |e| truncated(path, e);
    let header: DataHeader = serde_json::from_slice(&read_blob(&mut r, limit).map_err(t)?)?;
    let count = r.read_u64::<LE>().map_err(t)?;
    let mut images = Vec::new();
    for _ in 0..count {
        let id = r.read_u64::<LE>().map_err(t)?;
        let mut dims = [0u32; 3];
        r.read_u32_into::<LE>(&mut dims).map_err(t)?;
        let (c, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        if (c * h * w * 4) as u64 > limit {
            return Err(Error::Format(format!("{}: image {id} larger than the file", path.display())));
        }
        let pixels = Image::new(c, h, w, read_f32s(&mut r, c * h * w).map_err(t)?)?;
        let n_shapes = r.read_u32::<LE>().map_err(t)?;
        let mut shapes = Vec::new();
        for _ in 0..n_shapes {
            let class = r.read_u32::<LE>().map_err(t)? as usize;
            let kind = match r.read_u8().map_err(t)? {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Square,
                2 => ShapeKind::Triangle,
                k => return Err(Error::Format(format!("{}: unknown shape code {k}", path.display()))),
            };
            let mut v = [0u32; 4];
            r.read_u32_into::<LE>(&mut v).map_err(t)?;
            let rect = Rect { y0: v[0] as usize, y1: v[1] as usize, x0: v[2] as usize, x1: v[3] as usize };
            shapes.push(ShapeInstance { class, kind, rect });
        }
        let segmentation = rle_decode(&read_rle(&mut r, limit).map_err(t)?)?;
        images.push(AnnotatedImage { id, pixels, shapes, segmentation });
    }
    Ok(Dataset { config: header.config, images })
}

/// Saves `id → feature` records; every vector must share one dimension.
pub fn save_features(features: &BTreeMap<u64, Vec<f32>>, path: &Path) -> Result<()> {
    let dim = features.values().next().map_or(0, Vec::len);
    if let Some((id, v)) = features.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::Format(format!("inconsistent feature dimension: id {id} has {} values, expected {dim}", v.len())));
    }
    write_atomic(path, |w| {
        w.write_all(FEAT_MAGIC)?;
        w.write_u64::<LE>(features.len() as u64)?;
        w.write_u32::<LE>(dim as u32)?;
        for (&id, v) in features {
            w.write_u64::<LE>(id)?;
            write_f32s(w, v)?;
        }
        Ok(())
    })
}

/// Loads a feature file. A zero-length file is an empty map.
pub fn load_features(path: &Path) -> Result<BTreeMap<u64, Vec<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    if bytes.is_empty() {
        return Ok(map);
    }
    let mut r = bytes.as_slice();
    read_magic(&mut r, FEAT_MAGIC, path)?;
    let t = |e| truncated(path, e);
    let n = r.read_u64::<LE>().map_err(t)?;
    let dim = r.read_u32::<LE>().map_err(t)? as u64;
    let body = r.len() as u64;
    if body != n * (8 + 4 * dim) {
        return Err(Error::Format(format!(
            "{}: inconsistent feature dimension: {n} records of dim {dim} need {} bytes, found {body}",
            path.display(),
            n * (8 + 4 * dim)
        )));
    }
    for _ in 0..n {
        let id = r.read_u64::<LE>().map_err(t)?;
        let v = read_f32s(&mut r, dim as usize).map_err(t)?;
        if map.insert(id, v).is_some() {
            return Err(Error::Format(format!("{}: duplicate id {id}", path.display())));
        }
    }
    Ok(map)
}

/// 8-bit value of a pixel in [-1, 1]: `round(255·(x+1)/2)`.
pub fn to_u8(x: f32) -> u8 {
    (255.0 * (x.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

/// Writes an RGB image as an 8-bit PNG with `(key, value)` text chunks.
pub fn save_png(image: &Image, path: &Path, text: &[(&str, &str)]) -> Result<()> {
    let (h, w) = (image.height, image.width);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for c in 0..3 {
            rgb.push(to_u8(image.data[c.min(image.channels - 1) * h * w + p]));
        }
    }
    write_atomic(path, |out| {
        let mut enc = png::Encoder::new(out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string()).map_err(std::io::Error::other)?;
        }
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        writer.write_image_data(&rgb).map_err(std::io::Error::other)?;
        writer.finish().map_err(std::io::Error::other)
    })
}

/// Tiles equally sized images into a `cols`-wide grid with a 1-pixel border.
pub fn tile_grid(images: &[Image], cols: usize) -> Image {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut grid = Image::filled(3, gh, gw, 1.0);
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    grid.set(c, oy + y, ox + x, img.at(c.min(img.channels - 1), y, x));
                }
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_shapes;

    #[test]
    fn rle_round_trip() {
        let mut m = Mask::zeros(2, 3, 4);
        m.set(0, 0, 0, 1);
        m.set(1, 2, 3, 1);
        m.set(1, 1, 1, 1);
        let rle = rle_encode(&m);
        assert_eq!(rle.runs[0], 0);
        assert_eq!(rle_decode(&rle).unwrap(), m);
        assert_eq!(rle_encode(&Mask::zeros(1, 2, 2)).runs, vec![4]);
        let bad = RleMask { runs: vec![1], ..rle };
        assert!(rle_decode(&bad).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let cfg = ShapesConfig { count: 12, max_shapes: 2, ..ShapesConfig::default() };
        let ds = generate_shapes(&cfg).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert_eq!(&fs::read(&path).unwrap()[..12], DATA_MAGIC);

        let empty = Dataset { config: cfg, images: vec![] };
        save_dataset(&empty, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), empty);
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"NOT-A-DATASET-FILE").unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("SGDM-DATA-v1"), "{err}");

        let ds = generate_shapes(&ShapesConfig { count: 3, ..ShapesConfig::default() }).unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn feature_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let map: BTreeMap<u64, Vec<f32>> = (0..5).map(|i| (i * 3, vec![i as f32; 64])).collect();
        save_features(&map, &path).unwrap();
        assert_eq!(load_features(&path).unwrap(), map);

        let mut mixed = map.clone();
        mixed.insert(100, vec![0.0; 65]);
        assert!(save_features(&mixed, &path).unwrap_err().to_string().contains("inconsistent feature dimension"));

        // Hand-built file: header claims 64 but one record carries 65 values.
        let mut raw = FEAT_MAGIC.to_vec();
        raw.extend(2u64.to_le_bytes());
        raw.extend(64u32.to_le_bytes());
        for (id, dim) in [(0u64, 64), (1, 65)] {
            raw.extend(id.to_le_bytes());
            raw.extend(std::iter::repeat_n(0u8, 4 * dim));
        }
        fs::write(&path, &raw).unwrap();
        assert!(load_features(&path).unwrap_err().to_string().contains("inconsistent feature dimension"));

        let mut dup = FEAT_MAGIC.to_vec();
        dup.extend(2u64.to_le_bytes());
        dup.extend(1u32.to_le_bytes());
        for _ in 0..2 {
            dup.extend(7u64.to_le_bytes());
            dup.extend(1f32.to_le_bytes());
        }
        fs::write(&path, &dup).unwrap();
        assert!(load_features(&path).unwrap_err().to_string().contains("duplicate"));

        fs::write(&path, b"").unwrap();
        assert!(load_features(&path).unwrap().is_empty());
    }

    #[test]
    fn png_mapping() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let grid = tile_grid(&[Image::filled(3, 4, 4, 0.0), Image::filled(3, 4, 4, 1.0)], 2);
        assert_eq!((grid.height, grid.width), (6, 11));
        save_png(&grid, &path, &[("config", "{}")]).unwrap();
        let dec = png::Decoder::new(BufReader::new(File::open(&path).unwrap()));
        let reader = dec.read_info().unwrap();
        assert_eq!((reader.info().width, reader.info().height), (11, 6));
    }
}
