use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Channel, ChannelLabel, Geometry, VoxelGrid};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    channels: Vec<ChannelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelEntry {
    label: ChannelLabel,
    file: String,
}

/// Reads a `.vmeta` header and the `.raw` payload of every channel it lists.
pub fn load_volume(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let text = String::from_utf8(text).map_err(|e| Error::HeaderParse(e.to_string()))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))?;
    let geometry = Geometry {
        dims: header.dims,
        spacing: header.spacing_mm,
        origin: header.origin_mm,
    };
    geometry
        .validate()
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut channels = Vec::with_capacity(header.channels.len());
    for entry in &header.channels {
        let bytes = read_file(&dir.join(&entry.file))?;
        if bytes.len() % 4 != 0 || bytes.len() / 4 != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                found: bytes.len() / 4,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        channels.push(Channel::new(entry.label, data));
    }
    VoxelGrid::new(geometry, channels).map_err(|e| match e {
        Error::InvalidGrid(msg) => Error::HeaderParse(msg),
        other => other,
    })
}

/// Writes `path` (the header) plus one `<stem>_<LABEL>.raw` file per channel
/// next to it.
pub fn save_volume(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string();
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let g = grid.geometry();
    let mut entries = Vec::new();
    for channel in grid.channels() {
        let file = format!("{stem}_{}.raw", channel.label);
        let mut bytes = Vec::with_capacity(channel.data.len() * 4);
        for v in &channel.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let raw_path = dir.join(&file);
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
        entries.push(ChannelEntry {
            label: channel.label,
            file,
        });
    }
    let header = Header {
        dims: g.dims,
        spacing_mm: g.spacing,
        origin_mm: g.origin,
        channels: entries,
    };
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(super) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile(PathBuf::from(path)),
        _ => Error::io(path, e),
    })
}
