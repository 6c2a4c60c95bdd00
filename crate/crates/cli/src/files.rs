//! On-disk artifact formats.
//!
//! Three little-endian binary layouts share the header discipline
//! `magic | version u16 | dims | payload`:
//!
//! - `MEDS` feature file: flags u16 (bit0 labels, bit1 masks), N u64,
//!   H/W/C u32, class ids u32xN, features f32 image-major in (h, w, c)
//!   order, then optional labels u8xN and masks u8x(N*H*W).
//! - `MEDC` score cache: N u64, H/W u32, scores f32 image-major.
//! - `MEDP` checkpoint: channels/hidden u32, count u64, parameters f64
//!   in the reconstructor's flat order.
//!
//! Features and scores are stored at f32 precision, so writing is lossy
//! for values that need the full f64 mantissa; reading is exact and a
//! second write of what was read is byte-identical. Checkpoints keep f64
//! so training state round-trips exactly. A line-oriented text format for
//! feature datasets exists for tests.

use std::fs;
use std::path::Path;

use meds_core::dataset::{DataError, FeatureDataset, PatchFeatureMap};
use meds_core::memory::ScoreMap;
use meds_core::reconstructor::{hidden_width, Reconstructor};
use thiserror::Error;

const FEATURE_MAGIC: [u8; 4] = *b"MEDS";
const CACHE_MAGIC: [u8; 4] = *b"MEDC";
const CHECKPOINT_MAGIC: [u8; 4] = *b"MEDP";
const FORMAT_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;
const FLAG_MASKS: u16 = 2;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { expected: u16, found: u16 },
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("header dimensions overflow the address space")]
    Overflow,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("inconsistent content: {0}")]
    Inconsistent(&'static str),
    #[error("invalid data: {0}")]
    Data(#[from] DataError),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FileError> {
        let end = self.pos.checked_add(n).ok_or(FileError::Overflow)?;
        if end > self.buf.len() {
            return Err(FileError::Truncated(what));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FileError> {
        let got = self.bytes(4, "magic")?;
        let found = [got[0], got[1], got[2], got[3]];
        if found != expected {
            return Err(FileError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FileError> {
        let found = self.u16("version")?;
        if found != FORMAT_VERSION {
            return Err(FileError::Version {
                expected: FORMAT_VERSION,
                found,
            });
        }
        Ok(())
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FileError> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FileError> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn f32_slice(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>, FileError> {
        let need = count.checked_mul(4).ok_or(FileError::Overflow)?;
        let raw = self.bytes(need, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn f64_slice(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>, FileError> {
        let need = count.checked_mul(8).ok_or(FileError::Overflow)?;
        let raw = self.bytes(need, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<(), FileError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FileError::TrailingBytes)
        }
    }
}

fn usize_from(n: u64) -> Result<usize, FileError> {
    usize::try_from(n).map_err(|_| FileError::Overflow)
}

/// The single (H, W, C) grid a feature or cache file can hold.
fn uniform_shape(shapes: impl Iterator<Item = (usize, usize, usize)>) -> Result<(usize, usize, usize), FileError> {
    let mut found = None;
    for shape in shapes {
        match found {
            None => found = Some(shape),
            Some(first) if first != shape => {
                return Err(FileError::Inconsistent(
                    "file format requires one grid shape across all images",
                ))
            }
            Some(_) => {}
        }
    }
    Ok(found.unwrap_or((0, 0, 0)))
}

pub fn write_feature_file(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<(), FileError> {
    let (h, w, c) = uniform_shape(dataset.images().iter().map(|i| i.shape()))?;
    let labels = dataset.truth_labels();
    let masks = dataset.masks();
    let mut flags = 0u16;
    if labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if masks.is_some() {
        flags |= FLAG_MASKS;
    }

    let mut out = Vec::new();
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for &class in dataset.class_ids() {
        out.extend_from_slice(&class.to_le_bytes());
    }
    for image in dataset.images() {
        for &v in image.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(labels) = labels {
        out.extend(labels.iter().map(|&l| l as u8));
    }
    if let Some(masks) = masks {
        for mask in masks {
            out.extend(mask.iter().map(|&m| m as u8));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureDataset, FileError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let flags = r.u16("flags")?;
    let n = usize_from(r.u64("image count")?)?;
    let h = usize_from(r.u32("height")?.into())?;
    let w = usize_from(r.u32("width")?.into())?;
    let c = usize_from(r.u32("channels")?.into())?;
    let per_image = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or(FileError::Overflow)?;
    n.checked_mul(per_image).ok_or(FileError::Overflow)?;

    let mut class_ids = Vec::with_capacity(n);
    for _ in 0..n {
        class_ids.push(r.u32("class ids")?);
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let values = r.f32_slice(per_image, "feature payload")?;
        images.push(PatchFeatureMap::new(h, w, c, values)?);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = r.bytes(n, "labels")?;
        let mut labels = Vec::with_capacity(n);
        for &b in raw {
            match b {
                0 => labels.push(false),
                1 => labels.push(true),
                _ => return Err(FileError::Inconsistent("label byte must be 0 or 1")),
            }
        }
        Some(labels)
    } else {
        None
    };
    let masks = if flags & FLAG_MASKS != 0 {
        let per_mask = h.checked_mul(w).ok_or(FileError::Overflow)?;
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = r.bytes(per_mask, "masks")?;
            let mut mask = Vec::with_capacity(per_mask);
            for &b in raw {
                match b {
                    0 => mask.push(false),
                    1 => mask.push(true),
                    _ => return Err(FileError::Inconsistent("mask byte must be 0 or 1")),
                }
            }
            masks.push(mask);
        }
        Some(masks)
    } else {
        None
    };
    r.finish()?;
    Ok(FeatureDataset::new(images, class_ids, labels, masks)?)
}

pub fn write_score_cache(maps: &[ScoreMap], path: impl AsRef<Path>) -> Result<(), FileError> {
    let (h, w, _) = uniform_shape(maps.iter().map(|m| (m.height(), m.width(), 1)))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(maps.len() as u64).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for map in maps {
        for &v in map.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_score_cache(path: impl AsRef<Path>) -> Result<Vec<ScoreMap>, FileError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(CACHE_MAGIC)?;
    r.version()?;
    let n = usize_from(r.u64("map count")?)?;
    let h = usize_from(r.u32("height")?.into())?;
    let w = usize_from(r.u32("width")?.into())?;
    let per_map = h.checked_mul(w).ok_or(FileError::Overflow)?;
    n.checked_mul(per_map).ok_or(FileError::Overflow)?;
    let mut maps = Vec::with_capacity(n);
    for _ in 0..n {
        let values = r.f32_slice(per_map, "score payload")?;
        maps.push(ScoreMap::new(h, w, values)?);
    }
    r.finish()?;
    Ok(maps)
}

pub fn write_checkpoint(model: &Reconstructor, path: impl AsRef<Path>) -> Result<(), FileError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(model.hidden() as u32).to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for &p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Reconstructor, FileError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let channels = usize_from(r.u32("channels")?.into())?;
    let hidden = usize_from(r.u32("hidden width")?.into())?;
    let count = usize_from(r.u64("parameter count")?)?;
    if channels == 0 || hidden != hidden_width(channels) {
        return Err(FileError::Inconsistent(
            "checkpoint hidden width does not match channels",
        ));
    }
    if count != Reconstructor::param_count_for(channels) {
        return Err(FileError::Inconsistent(
            "checkpoint parameter count does not match architecture",
        ));
    }
    let params = r.f64_slice(count, "parameters")?;
    r.finish()?;
    Ok(Reconstructor::from_params(channels, params)?)
}

/// Text twin of the feature format, for tests and manual inspection.
/// Floats use shortest round-trip decimal, so read(write(d)) is exact.
pub fn write_text_dataset(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<(), FileError> {
    use std::fmt::Write as _;
    let (h, w, c) = uniform_shape(dataset.images().iter().map(|i| i.shape()))?;
    let labels = dataset.truth_labels();
    let masks = dataset.masks();
    let mut out = String::new();
    let _ = writeln!(out, "meds-text {FORMAT_VERSION}");
    let _ = writeln!(
        out,
        "{} {} {} {} {} {}",
        dataset.len(),
        h,
        w,
        c,
        labels.is_some() as u8,
        masks.is_some() as u8
    );
    for i in 0..dataset.len() {
        let _ = write!(out, "{}", dataset.class_id(i));
        if let Some(labels) = labels {
            let _ = write!(out, " {}", labels[i] as u8);
        }
        out.push('\n');
        for (_, _, patch) in dataset.image(i).patches() {
            let mut first = true;
            for &v in patch {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
                first = false;
            }
            out.push('\n');
        }
        if let Some(masks) = masks {
            for &bit in &masks[i] {
                out.push(if bit { '1' } else { '0' });
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_text_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset, FileError> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().ok_or(FileError::Truncated("text header"))?;
    if header != format!("meds-text {FORMAT_VERSION}") {
        return Err(FileError::Inconsistent("unrecognized text header"));
    }
    let dims = lines.next().ok_or(FileError::Truncated("text dims"))?;
    let fields: Vec<&str> = dims.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(FileError::Inconsistent("dims line needs six fields"));
    }
    let parse = |s: &str| -> Result<usize, FileError> {
        s.parse().map_err(|_| FileError::Inconsistent("bad integer in dims"))
    };
    let n = parse(fields[0])?;
    let (h, w, c) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    let has_labels = parse(fields[4])? != 0;
    let has_masks = parse(fields[5])? != 0;

    let mut images = Vec::with_capacity(n);
    let mut class_ids = Vec::with_capacity(n);
    let mut labels = has_labels.then(Vec::new);
    let mut masks = has_masks.then(Vec::new);
    for _ in 0..n {
        let head = lines.next().ok_or(FileError::Truncated("image line"))?;
        let mut parts = head.split_whitespace();
        let class: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(FileError::Inconsistent("bad class id"))?;
        class_ids.push(class);
        if let Some(labels) = &mut labels {
            let bit: u8 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(FileError::Inconsistent("missing label"))?;
            labels.push(bit != 0);
        }
        let mut values = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            let row = lines.next().ok_or(FileError::Truncated("patch line"))?;
            for token in row.split_whitespace() {
                let v: f64 = token
                    .parse()
                    .map_err(|_| FileError::Inconsistent("bad float"))?;
                values.push(v);
            }
        }
        images.push(PatchFeatureMap::new(h, w, c, values)?);
        if let Some(masks) = &mut masks {
            let bits = lines.next().ok_or(FileError::Truncated("mask line"))?;
            if bits.len() != h * w {
                return Err(FileError::Inconsistent("mask line length"));
            }
            let mut mask = Vec::with_capacity(h * w);
            for ch in bits.chars() {
                match ch {
                    '0' => mask.push(false),
                    '1' => mask.push(true),
                    _ => return Err(FileError::Inconsistent("mask char must be 0 or 1")),
                }
            }
            masks.push(mask);
        }
    }
    if lines.next().is_some() {
        return Err(FileError::TrailingBytes);
    }
    Ok(FeatureDataset::new(images, class_ids, labels, masks)?)
}
