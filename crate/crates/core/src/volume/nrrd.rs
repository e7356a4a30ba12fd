//! Minimal NRRD import: detached header, raw little-endian float, 3 dims.

use std::path::Path;

use super::io::read_file;
use super::{Channel, ChannelLabel, Geometry, VoxelGrid};
use crate::error::{Error, Result};

/// Imports a detached-header NRRD volume as a single-channel grid.
///
/// Only `type: float`, `endian: little`, `encoding: raw` and `dimension: 3`
/// are accepted; every other variant is a `HeaderParse` error. Spacing comes
/// from `spacings` or a diagonal `space directions` (default 1 mm), the
/// origin from `space origin` (default 0), which NRRD places at the first
/// voxel center.
pub fn import_nrrd(path: impl AsRef<Path>, label: ChannelLabel) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::HeaderParse(e.to_string()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(magic) if magic.starts_with("NRRD000") => {}
        _ => return Err(Error::HeaderParse("missing NRRD magic".into())),
    }

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut data_file: Option<String> = None;
    let mut kind_ok = false;
    let mut endian_ok = false;
    let mut encoding_ok = false;
    let mut dimension_ok = false;

    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        // key:=value lines are key/value pairs, not fields
        let value = value.trim_start_matches('=').trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "type" => match value {
                "float" | "float32" => kind_ok = true,
                other => return Err(Error::HeaderParse(format!("unsupported type {other}"))),
            },
            "dimension" => {
                if value != "3" {
                    return Err(Error::HeaderParse(format!("unsupported dimension {value}")));
                }
                dimension_ok = true;
            }
            "endian" => {
                if value != "little" {
                    return Err(Error::HeaderParse(format!("unsupported endian {value}")));
                }
                endian_ok = true;
            }
            "encoding" => {
                if value != "raw" {
                    return Err(Error::HeaderParse(format!("unsupported encoding {value}")));
                }
                encoding_ok = true;
            }
            "sizes" => dims = Some(parse_three(value, "sizes")?),
            "spacings" => spacing = parse_three(value, "spacings")?,
            "space directions" => spacing = parse_directions(value)?,
            "space origin" => origin = parse_vector(value)?,
            "data file" | "datafile" => data_file = Some(value.to_string()),
            _ => {}
        }
    }

    if !(kind_ok && endian_ok && encoding_ok && dimension_ok) {
        return Err(Error::HeaderParse(
            "header must declare type, dimension, endian and encoding".into(),
        ));
    }
    let dims = dims.ok_or_else(|| Error::HeaderParse("missing sizes".into()))?;
    let data_file = data_file.ok_or_else(|| Error::HeaderParse("attached data not supported".into()))?;

    // NRRD origin is the first voxel center; ours is the corner.
    let corner = [
        origin[0] - 0.5 * spacing[0],
        origin[1] - 0.5 * spacing[1],
        origin[2] - 0.5 * spacing[2],
    ];
    let geometry = Geometry::new(dims, spacing, corner).map_err(|e| Error::HeaderParse(e.to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let raw = read_file(&dir.join(data_file))?;
    if raw.len() != geometry.len() * 4 {
        return Err(Error::SizeMismatch {
            expected: geometry.len(),
            found: raw.len() / 4,
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    VoxelGrid::new(geometry, vec![Channel::new(label, data)])
}

fn parse_three<T: std::str::FromStr>(value: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|s| s.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::HeaderParse(format!("bad {what}: {value}")))?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::HeaderParse(format!("{what} needs 3 values")))
}

fn parse_vector(value: &str) -> Result<[f64; 3]> {
    let inner = value
        .trim()
        .strip_prefix('(')
        .and_then(|v| v.strip_suffix(')'))
        .ok_or_else(|| Error::HeaderParse(format!("bad vector {value}")))?;
    let parts: Vec<f64> = inner
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::HeaderParse(format!("bad vector {value}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::HeaderParse(format!("bad vector {value}")))
}

fn parse_directions(value: &str) -> Result<[f64; 3]> {
    let vectors: Vec<[f64; 3]> = value
        .split_whitespace()
        .map(parse_vector)
        .collect::<Result<_>>()?;
    if vectors.len() != 3 {
        return Err(Error::HeaderParse("space directions needs 3 vectors".into()));
    }
    let mut spacing = [0.0; 3];
    for (axis, v) in vectors.iter().enumerate() {
        for (other, &c) in v.iter().enumerate() {
            if other != axis && c.abs() > 1e-9 {
                return Err(Error::HeaderParse("only axis-aligned volumes are supported".into()));
            }
        }
        spacing[axis] = v[axis].abs();
    }
    Ok(spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, header: &str, values: usize) -> std::path::PathBuf {
        let path = dir.join("vol.nhdr");
        fs::write(&path, header).unwrap();
        let bytes: Vec<u8> = (0..values).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(dir.join("vol.raw"), bytes).unwrap();
        path
    }

    const GOOD: &str = "NRRD0004\ntype: float\ndimension: 3\nsizes: 2 3 4\nspace directions: (2,0,0) (0,2,0) (0,0,3)\nspace origin: (1,1,1.5)\nendian: little\nencoding: raw\ndata file: vol.raw\n";

    #[test]
    fn imports_float_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), GOOD, 24);
        let grid = import_nrrd(&path, ChannelLabel::Pet).unwrap();
        assert_eq!(grid.dims(), [2, 3, 4]);
        assert_eq!(grid.geometry().spacing, [2.0, 2.0, 3.0]);
        assert_eq!(grid.geometry().origin, [0.0, 0.0, 0.0]);
        assert_eq!(grid.data(ChannelLabel::Pet).unwrap()[23], 23.0);
    }

    #[test]
    fn rejects_other_variants() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            GOOD.replace("type: float", "type: short"),
            GOOD.replace("endian: little", "endian: big"),
            GOOD.replace("encoding: raw", "encoding: gzip"),
            GOOD.replace("dimension: 3", "dimension: 4"),
            GOOD.replace("data file: vol.raw\n", ""),
        ] {
            let path = write(dir.path(), &bad, 24);
            assert!(
                matches!(import_nrrd(&path, ChannelLabel::Pet), Err(Error::HeaderParse(_))),
                "{bad}"
            );
        }
    }
}
