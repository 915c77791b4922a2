//! MetaImage (`.mha` / `.mhd` + `.raw`) reading and writing.
//!
//! Only uncompressed little-endian `MET_SHORT` and `MET_FLOAT` payloads are
//! supported. Scalar volumes use `NDims = 3`; vector fields are written as
//! three stacked scalar channels with `NDims = 4` and the channel axis last
//! (slowest). Two comment tags carry metadata the format has no key for:
//! `NCF_NORMALIZED=1` and `NCF_FIELD_UNIT=<normalized|voxel>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{Dims, FieldUnit, IntensityUnit, VectorField, Volume};

pub const NORMALIZED_TAG: &str = "NCF_NORMALIZED=1";
pub const FIELD_UNIT_TAG: &str = "NCF_FIELD_UNIT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Short,
    Float,
}

impl ElementType {
    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }
}

/// Keys describing world placement; accepted and ignored.
const IGNORED_KEYS: &[&str] = &[
    "Offset",
    "Origin",
    "Position",
    "TransformMatrix",
    "Rotation",
    "Orientation",
    "CenterOfRotation",
    "AnatomicalOrientation",
    "ElementSize",
    "Name",
];

#[derive(Debug)]
struct RawImage {
    dims: Vec<usize>,
    dims_line: String,
    spacing: Vec<f64>,
    element_type: ElementType,
    tags: Vec<String>,
    data: Vec<f32>,
}

#[derive(Debug)]
enum DataFile {
    Local,
    External(PathBuf),
}

fn header_err(line: &str, reason: impl Into<String>) -> Error {
    Error::Header {
        line: line.to_string(),
        reason: reason.into(),
    }
}

fn parse_bool(line: &str, v: &str) -> Result<bool> {
    match v {
        "True" | "true" | "TRUE" | "1" => Ok(true),
        "False" | "false" | "FALSE" | "0" => Ok(false),
        _ => Err(header_err(line, "expected True or False")),
    }
}

fn read_raw(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    let mut pos = 0usize;
    let mut ndims: Option<usize> = None;
    let mut dims: Option<(Vec<usize>, String)> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut element_type: Option<ElementType> = None;
    let mut object_seen = false;
    let mut tags = Vec::new();
    let mut data_file: Option<(DataFile, String)> = None;

    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .unwrap_or(bytes.len());
        let raw_line = &bytes[pos..end];
        pos = (end + 1).min(bytes.len());
        let line = std::str::from_utf8(raw_line)
            .map_err(|_| header_err("<binary>", "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| header_err(line, "expected `Key = Value`"))?;

        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(header_err(line, "only ObjectType = Image is supported"));
                }
                object_seen = true;
            }
            "NDims" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| header_err(line, "NDims is not an integer"))?;
                if !(3..=4).contains(&n) {
                    return Err(header_err(line, "only 3-dimensional images are supported"));
                }
                ndims = Some(n);
            }
            "DimSize" => {
                let d: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| header_err(line, "DimSize entries must be positive integers"))?;
                if d.iter().any(|&s| s == 0) {
                    return Err(header_err(line, "DimSize entries must be positive integers"));
                }
                dims = Some((d, line.to_string()));
            }
            "ElementSpacing" => {
                let s: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| header_err(line, "ElementSpacing entries must be numbers"))?;
                if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(header_err(line, "ElementSpacing entries must be positive"));
                }
                spacing = Some(s);
            }
            "ElementType" => {
                element_type = Some(match value {
                    "MET_SHORT" => ElementType::Short,
                    "MET_FLOAT" => ElementType::Float,
                    _ => return Err(header_err(line, "ElementType must be MET_SHORT or MET_FLOAT")),
                });
            }
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                if parse_bool(line, value)? {
                    return Err(header_err(line, "big-endian payloads are not supported"));
                }
            }
            "BinaryData" => {
                if !parse_bool(line, value)? {
                    return Err(header_err(line, "ASCII payloads are not supported"));
                }
            }
            "CompressedData" => {
                if parse_bool(line, value)? {
                    return Err(header_err(line, "compressed payloads are not supported"));
                }
            }
            "ElementNumberOfChannels" => {
                if value != "1" {
                    return Err(header_err(line, "interleaved channels are not supported"));
                }
            }
            "Comment" => tags.push(value.to_string()),
            "ElementDataFile" => {
                let df = if value == "LOCAL" {
                    DataFile::Local
                } else if value.contains(' ') || value.starts_with("LIST") {
                    return Err(header_err(line, "multi-file payloads are not supported"));
                } else {
                    let base = path.parent().unwrap_or_else(|| Path::new("."));
                    DataFile::External(base.join(value))
                };
                data_file = Some((df, line.to_string()));
                break;
            }
            k if IGNORED_KEYS.contains(&k) => {}
            _ => return Err(header_err(line, "unknown header key")),
        }
    }

    if !object_seen {
        return Err(header_err("ObjectType", "missing ObjectType = Image"));
    }
    let ndims = ndims.ok_or_else(|| header_err("NDims", "missing NDims"))?;
    let (dims, dims_line) = dims.ok_or_else(|| header_err("DimSize", "missing DimSize"))?;
    if dims.len() != ndims {
        return Err(header_err(&dims_line, format!("expected {ndims} entries")));
    }
    let spacing = match spacing {
        Some(s) if s.len() != ndims => {
            return Err(header_err(
                "ElementSpacing",
                format!("expected {ndims} entries, found {}", s.len()),
            ))
        }
        Some(s) => s,
        None => vec![1.0; ndims],
    };
    let element_type =
        element_type.ok_or_else(|| header_err("ElementType", "missing ElementType"))?;
    let (data_file, _) =
        data_file.ok_or_else(|| header_err("ElementDataFile", "missing ElementDataFile"))?;

    let payload: std::borrow::Cow<[u8]> = match data_file {
        DataFile::Local => std::borrow::Cow::Borrowed(&bytes[pos..]),
        DataFile::External(p) => {
            std::borrow::Cow::Owned(fs::read(&p).map_err(|e| Error::io(p, e))?)
        }
    };

    let count: usize = dims.iter().product();
    let expected = count * element_type.size();
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            line: dims_line,
            expected,
            found: payload.len(),
        });
    }
    let data = match element_type {
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
    };

    Ok(RawImage {
        dims,
        dims_line,
        spacing,
        element_type,
        tags,
        data,
    })
}

fn format_list<T: std::fmt::Display>(vals: &[T]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_raw(path: &Path, dims: &[usize], spacing: &[f64], tags: &[String], data: &[f32]) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let external = match ext.as_deref() {
        Some("mha") => None,
        Some("mhd") => Some(path.with_extension("raw")),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: MetaImage files must end in .mha or .mhd",
                path.display()
            )))
        }
    };

    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str(&format!("NDims = {}\n", dims.len()));
    header.push_str("BinaryData = True\n");
    header.push_str("ElementByteOrderMSB = False\n");
    header.push_str("CompressedData = False\n");
    header.push_str(&format!("DimSize = {}\n", format_list(dims)));
    header.push_str(&format!("ElementSpacing = {}\n", format_list(spacing)));
    header.push_str("ElementType = MET_FLOAT\n");
    for t in tags {
        header.push_str(&format!("Comment = {t}\n"));
    }

    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }

    match external {
        None => {
            header.push_str("ElementDataFile = LOCAL\n");
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(header.as_bytes())
                .and_then(|_| f.write_all(&payload))
                .map_err(|e| Error::io(path, e))?;
        }
        Some(raw) => {
            let name = raw
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::InvalidArgument(format!("bad path {}", raw.display())))?;
            header.push_str(&format!("ElementDataFile = {name}\n"));
            fs::write(&raw, &payload).map_err(|e| Error::io(&raw, e))?;
            fs::write(path, header).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.dims.len() != 3 {
        return Err(header_err(&raw.dims_line, "expected a 3-dimensional scalar image"));
    }
    let dims = Dims::new(raw.dims[0], raw.dims[1], raw.dims[2])?;
    let normalized = raw.tags.iter().any(|t| t == NORMALIZED_TAG);
    let unit = match raw.element_type {
        ElementType::Short => IntensityUnit::Hu,
        ElementType::Float if normalized => IntensityUnit::Normalized,
        ElementType::Float => IntensityUnit::Hu,
    };
    Volume::new(dims, [raw.spacing[0], raw.spacing[1], raw.spacing[2]], unit, raw.data)
}

/// Writes `v` as `MET_FLOAT`; `.mha` produces a single file, `.mhd` a header
/// plus a sibling `.raw` payload.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let tags = if v.unit() == IntensityUnit::Normalized {
        vec![NORMALIZED_TAG.to_string()]
    } else {
        Vec::new()
    };
    write_raw(path.as_ref(), &v.dims().as_vec(), &v.spacing(), &tags, v.data())
}

pub fn save_field(f: &VectorField, path: impl AsRef<Path>) -> Result<()> {
    let d = f.dims();
    let tags = vec![format!("{FIELD_UNIT_TAG}={}", f.unit().tag())];
    write_raw(
        path.as_ref(),
        &[d.w(), d.h(), d.d(), 3],
        &[1.0, 1.0, 1.0, 1.0],
        &tags,
        f.data(),
    )
}

pub fn load_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let raw = read_raw(path.as_ref())?;
    let channels = if raw.dims.len() == 3 { 1 } else { raw.dims[3] };
    if channels != 3 {
        return Err(Error::ChannelCount(channels));
    }
    let unit = raw
        .tags
        .iter()
        .find_map(|t| t.strip_prefix(FIELD_UNIT_TAG).and_then(|r| r.strip_prefix('=')))
        .ok_or(Error::MissingUnitTag)?;
    let unit = FieldUnit::from_tag(unit)
        .ok_or_else(|| header_err(&format!("Comment = {FIELD_UNIT_TAG}={unit}"), "unknown field unit"))?;
    let dims = Dims::new(raw.dims[0], raw.dims[1], raw.dims[2])?;
    VectorField::new(dims, unit, raw.data)
}
