//! Dense feature-map container and file I/O.
//!
//! A [`FeatureMap`] is an H x W x C grid of finite doubles in row-major
//! (y, x, c) order, so node `i = y * width + x` matches the graph module's
//! node numbering. Channels may be split into groups; every grouped
//! operation works on that group's contiguous channel slice.
//!
//! Two on-disk formats are supported: the crate's own FMAP binary format
//! (magic `LTF2`, little-endian u32 header `version=1, H, W, C`, then
//! H*W*C little-endian f32 values) and binary 8-bit PGM/PPM images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FMAP_MAGIC: &[u8; 4] = b"LTF2";
pub const FMAP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    groups: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a map from raw row-major data, with a single channel group.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid dimensions: {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("data[{pos}]")));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            groups: 1,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        FeatureMap::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Sets the channel-grouping factor. `groups` must divide `channels`.
    pub fn with_groups(mut self, groups: usize) -> Result<Self> {
        if groups == 0 || !self.channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "groups {groups} does not divide channels {}",
                self.channels
            )));
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels_per_group(&self) -> usize {
        self.channels / self.groups
    }

    pub fn n_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn value(&self, node: usize, channel: usize) -> f64 {
        self.data[node * self.channels + channel]
    }

    /// All channels of one node.
    #[inline]
    pub fn node_row(&self, node: usize) -> &[f64] {
        &self.data[node * self.channels..(node + 1) * self.channels]
    }

    /// One group's channel slice of one node.
    #[inline]
    pub fn group_slice(&self, node: usize, group: usize) -> &[f64] {
        let cpg = self.channels_per_group();
        let base = node * self.channels + group * cpg;
        &self.data[base..base + cpg]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.groups == other.groups
    }

    /// Returns a copy with every value multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<FeatureMap> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        if let Some(pos) = out.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("scaled data[{pos}]")));
        }
        Ok(out)
    }
}

fn read_u32_le(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Loads a map from the FMAP binary format, widening f32 payload to f64.
pub fn load_fmap(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            expected: 20,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != FMAP_MAGIC {
        return Err(Error::Parse(format!(
            "bad magic {:?}, expected {FMAP_MAGIC:?}",
            &bytes[0..4]
        )));
    }
    let version = read_u32_le(&bytes, 4);
    if version != FMAP_VERSION {
        return Err(Error::Parse(format!("unsupported version {version}")));
    }
    let height = read_u32_le(&bytes, 8) as usize;
    let width = read_u32_le(&bytes, 12) as usize;
    let channels = read_u32_le(&bytes, 16) as usize;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Parse(format!(
            "invalid dimensions: {height}x{width}x{channels}"
        )));
    }
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Parse("dimension overflow".into()))?;
    let expected = 20 + count * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 20 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("payload element {i}")));
        }
        data.push(v as f64);
    }
    FeatureMap::new(height, width, channels, data)
}

/// Writes the FMAP binary format. Values are narrowed to f32.
pub fn save_fmap(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let count = map.data.len();
    let mut bytes = Vec::with_capacity(20 + count * 4);
    bytes.extend_from_slice(FMAP_MAGIC);
    bytes.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.channels as u32).to_le_bytes());
    for (i, &v) in map.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("data[{i}]")));
        }
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct PnmHeader {
    color: bool,
    width: usize,
    height: usize,
    cursor: usize,
}

/// Parses a PGM/PPM header: magic, whitespace/comments, width, height,
/// maxval, one whitespace byte before the payload.
fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(Error::Truncated {
            expected: 2,
            found: bytes.len(),
        });
    }
    let color = match &bytes[0..2] {
        b"P5" => false,
        b"P6" => true,
        other => {
            return Err(Error::Parse(format!(
                "unsupported magic {:?}; only binary P5/P6 are accepted",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut cursor = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comment lines
        loop {
            match bytes.get(cursor) {
                Some(b) if b.is_ascii_whitespace() => cursor += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(cursor) {
                        cursor += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::Truncated {
                        expected: cursor + 1,
                        found: bytes.len(),
                    })
                }
            }
        }
        let start = cursor;
        while bytes.get(cursor).is_some_and(|b| b.is_ascii_digit()) {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::Parse("malformed header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..cursor]).unwrap();
        *field = text
            .parse()
            .map_err(|_| Error::Parse(format!("bad header field {text:?}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Parse(format!(
            "maxval {maxval}; only 8-bit images are accepted"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("invalid dimensions: {height}x{width}")));
    }
    // exactly one whitespace byte separates header and payload
    if !bytes.get(cursor).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Parse("missing header terminator".into()));
    }
    cursor += 1;
    Ok(PnmHeader {
        color,
        width,
        height,
        cursor,
    })
}

/// Loads a binary PGM (P5) or PPM (P6) image, scaling pixels to [0, 1].
pub fn from_image(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_pnm_header(&bytes)?;
    let channels = if header.color { 3 } else { 1 };
    let count = header.width * header.height * channels;
    let payload = &bytes[header.cursor..];
    if payload.len() < count {
        return Err(Error::Truncated {
            expected: header.cursor + count,
            found: bytes.len(),
        });
    }
    let data = payload[..count]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    FeatureMap::new(header.height, header.width, channels, data)
}

/// Writes a map as PGM (C=1) or PPM (C=3), clamping values into [0, 1].
pub fn to_image(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let magic = match map.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidArgument(format!(
                "cannot write {c}-channel map as PGM/PPM"
            )))
        }
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend(
        map.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
