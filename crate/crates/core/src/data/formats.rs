//! Native `hsc1`/`HSL1` containers and the ENVI band-sequential reader.
//!
//! `hsc1` is `HSC1\n`, a one-line JSON header, `\n`, then little-endian f32
//! values in band-sequential order. `HSL1` is `HSL1\n`, a one-line JSON header,
//! `\n`, then a little-endian u16 grid in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const CUBE_MAGIC: &[u8] = b"HSC1\n";
const GRID_MAGIC: &[u8] = b"HSL1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubeFormat {
    Hsc1,
    EnviBsq,
}

/// Codes stored in a split grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum SplitCode {
    None = 0,
    Train = 1,
    Test = 2,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CubeHeader {
    m: usize,
    n: usize,
    b: usize,
    dtype: String,
    order: String,
    #[serde(default)]
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridHeader {
    kind: String,
    m: usize,
    n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    class_names: Vec<String>,
}

pub fn load_cube(path: impl AsRef<Path>, format: CubeFormat) -> Result<HsiCube> {
    let path = path.as_ref();
    match format {
        CubeFormat::Hsc1 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let mut cube = decode_cube(&bytes)?;
            cube.provenance = format!("hsc1:{}", path.display());
            Ok(cube)
        }
        CubeFormat::EnviBsq => load_envi(path, None),
    }
}

/// Writes a cube as `hsc1`. Values are stored as f32.
pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)?).map_err(|e| Error::io(path, e))
}

fn canonical_line<T: Serialize>(header: &T) -> Result<Vec<u8>> {
    // A `Value` map is a BTreeMap, so keys come out sorted.
    let value = serde_json::to_value(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut line = serde_json::to_vec(&value).map_err(|e| Error::Format(e.to_string()))?;
    line.push(b'\n');
    Ok(line)
}

fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let (m, n, b) = (cube.rows(), cube.cols(), cube.bands());
    let header =
        CubeHeader { m, n, b, dtype: "f32".into(), order: "bsq".into(), class_names: cube.class_names.clone() };
    let mut out = CUBE_MAGIC.to_vec();
    out.extend(canonical_line(&header)?);
    out.reserve(m * n * b * 4);
    let data = cube.values().data();
    for k in 0..b {
        for p in 0..m * n {
            out.extend((data[p * b + k] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits `magic`, the header line and the payload, returning the payload offset.
fn split_header<'a>(bytes: &'a [u8], magic: &[u8], what: &str) -> Result<(&'a [u8], usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::Format(format!(
            "{what}: missing magic {:?} at byte 0",
            String::from_utf8_lossy(&magic[..magic.len() - 1])
        )));
    }
    let rest = &bytes[magic.len()..];
    let end = rest.iter().position(|&c| c == b'\n').ok_or_else(|| {
        Error::Format(format!("{what}: header starting at byte {} has no terminating newline", magic.len()))
    })?;
    Ok((&rest[..end], magic.len() + end + 1))
}

fn check_payload(what: &str, offset: usize, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Format(format!(
            "{what}: payload at byte {offset} should hold {expected} bytes (ending at byte {}), found {actual} bytes (ending at byte {})",
            offset + expected,
            offset + actual
        )));
    }
    Ok(())
}

fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let (line, offset) = split_header(bytes, CUBE_MAGIC, "hsc1")?;
    let header: CubeHeader = serde_json::from_slice(line).map_err(|e| Error::Format(format!("hsc1 header: {e}")))?;
    if header.dtype != "f32" || header.order != "bsq" {
        return Err(Error::Format(format!(
            "hsc1: unsupported dtype/order {}/{}, expected f32/bsq",
            header.dtype, header.order
        )));
    }
    let (m, n, b) = (header.m, header.n, header.b);
    let count = m * n * b;
    check_payload("hsc1", offset, count * 4, bytes.len() - offset)?;
    let payload = &bytes[offset..];
    let mut data = vec![0.0 as Real; count];
    for k in 0..b {
        for p in 0..m * n {
            let at = (k * m * n + p) * 4;
            let v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4-byte slice"));
            data[p * b + k] = v as Real;
        }
    }
    let mut cube = HsiCube::new(Tensor::new([m, n, b], data)?, "hsc1")?;
    cube.class_names = header.class_names;
    Ok(cube)
}

fn encode_grid(header: &GridHeader, grid: &[u16]) -> Result<Vec<u8>> {
    let mut out = GRID_MAGIC.to_vec();
    out.extend(canonical_line(header)?);
    for &v in grid {
        out.extend(v.to_le_bytes());
    }
    Ok(out)
}

fn decode_grid(bytes: &[u8], kind: &str) -> Result<(GridHeader, Vec<u16>)> {
    let (line, offset) = split_header(bytes, GRID_MAGIC, "HSL1")?;
    let header: GridHeader = serde_json::from_slice(line).map_err(|e| Error::Format(format!("HSL1 header: {e}")))?;
    if header.kind != kind {
        return Err(Error::Format(format!("HSL1: expected a `{kind}` grid, found `{}`", header.kind)));
    }
    let count = header.m * header.n;
    check_payload("HSL1", offset, count * 2, bytes.len() - offset)?;
    let grid = bytes[offset..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok((header, grid))
}

pub fn save_labels(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    grid: &[u16],
    class_names: &[String],
) -> Result<()> {
    let path = path.as_ref();
    if grid.len() != rows * cols {
        return Err(Error::Dimension(format!("label grid has {} cells, expected {rows}×{cols}", grid.len())));
    }
    let header = GridHeader { kind: "labels".into(), m: rows, n: cols, class_names: class_names.to_vec() };
    fs::write(path, encode_grid(&header, grid)?).map_err(|e| Error::io(path, e))
}

/// Writes the split of `labels`: 0 for neither, 1 for train, 2 for test.
pub fn save_split(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let grid: Vec<u16> = (0..labels.pixels())
        .map(|i| {
            if labels.train_mask[i] {
                SplitCode::Train as u16
            } else if labels.test_mask[i] {
                SplitCode::Test as u16
            } else {
                SplitCode::None as u16
            }
        })
        .collect();
    let header = GridHeader { kind: "split".into(), m: labels.rows, n: labels.cols, class_names: Vec::new() };
    fs::write(path, encode_grid(&header, &grid)?).map_err(|e| Error::io(path, e))
}

/// Reads a label grid: `(rows, cols, grid, class names)`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>, Vec<String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, grid) = decode_grid(&bytes, "labels")?;
    Ok((h.m, h.n, grid, h.class_names))
}

/// Reads a split grid: `(rows, cols, codes)`.
pub fn load_split(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, grid) = decode_grid(&bytes, "split")?;
    if let Some(i) = grid.iter().position(|&c| c > SplitCode::Test as u16) {
        return Err(Error::Data(format!("split code {} at pixel {i} is not 0, 1 or 2", grid[i])));
    }
    Ok((h.m, h.n, grid))
}

pub fn load_labels_and_split(labels: impl AsRef<Path>, split: impl AsRef<Path>) -> Result<LabelMap> {
    let (m, n, grid, names) = load_labels(labels)?;
    let (sm, sn, codes) = load_split(split)?;
    if (m, n) != (sm, sn) {
        return Err(Error::Dimension(format!("labels are {m}×{n} but the split is {sm}×{sn}")));
    }
    let train = codes.iter().map(|&c| c == SplitCode::Train as u16).collect();
    let test = codes.iter().map(|&c| c == SplitCode::Test as u16).collect();
    LabelMap::new(m, n, grid, names, train, test)
}

/// Parses `key = value` pairs of an ENVI text header. Braced values may span lines.
fn parse_envi_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ENVI") {
        return Err(Error::Format("ENVI header must start with the line `ENVI`".into()));
    }
    let mut out = BTreeMap::new();
    let mut pending: Option<(String, String)> = None;
    for line in lines {
        if let Some((key, mut value)) = pending.take() {
            value.push(' ');
            value.push_str(line.trim());
            if line.contains('}') {
                out.insert(key, value);
            } else {
                pending = Some((key, value));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else { continue };
        let (key, value) = (key.trim().to_ascii_lowercase(), value.trim().to_string());
        if value.starts_with('{') && !value.contains('}') {
            pending = Some((key, value));
        } else {
            out.insert(key, value);
        }
    }
    if let Some((key, _)) = pending {
        return Err(Error::Format(format!("ENVI header: unterminated `{{` in `{key}`")));
    }
    Ok(out)
}

fn envi_data_path(header: &Path) -> Result<PathBuf> {
    let stem = header.with_extension("");
    for candidate in [stem.clone(), stem.with_extension("img"), stem.with_extension("raw"), stem.with_extension("dat")]
    {
        if candidate != header && candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Data(format!("no payload file found next to {}", header.display())))
}

/// Reads an ENVI band-sequential raster. `header` is the `.hdr` file. The
/// payload defaults to the header path without extension, or with `.img`,
/// `.raw` or `.dat`.
pub fn load_envi(header: impl AsRef<Path>, payload: Option<&Path>) -> Result<HsiCube> {
    let header = header.as_ref();
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let keys = parse_envi_header(&text)?;
    let int = |key: &str, default: Option<usize>| -> Result<usize> {
        match keys.get(key) {
            Some(v) => v.parse().map_err(|_| Error::Format(format!("ENVI header: `{key}` = `{v}` is not an integer"))),
            None => default.ok_or_else(|| Error::Format(format!("ENVI header: missing `{key}`"))),
        }
    };
    let (n, m, b) = (int("samples", None)?, int("lines", None)?, int("bands", None)?);
    let dtype = int("data type", None)?;
    let offset = int("header offset", Some(0))?;
    if int("byte order", Some(0))? != 0 {
        return Err(Error::Format("ENVI: only little-endian payloads (byte order = 0) are supported".into()));
    }
    let interleave = keys.get("interleave").map(|s| s.to_ascii_lowercase()).unwrap_or_else(|| "bsq".into());
    if interleave != "bsq" {
        return Err(Error::Format(format!("ENVI: interleave `{interleave}` is not supported, only bsq")));
    }
    let width = match dtype {
        4 => 4,
        12 => 2,
        other => return Err(Error::Format(format!("ENVI: data type {other} is not supported (4 = f32, 12 = u16)"))),
    };
    let data_path = match payload {
        Some(p) => p.to_path_buf(),
        None => envi_data_path(header)?,
    };
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let count = m * n * b;
    check_payload("ENVI", offset, count * width, bytes.len().saturating_sub(offset))?;
    let payload = &bytes[offset..];
    let mut data = vec![0.0 as Real; count];
    for k in 0..b {
        for p in 0..m * n {
            let at = (k * m * n + p) * width;
            let v = if width == 4 {
                let v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4-byte slice"));
                if !v.is_finite() {
                    return Err(Error::Data(format!("ENVI: non-finite value at byte {}", offset + at)));
                }
                v as Real
            } else {
                u16::from_le_bytes([payload[at], payload[at + 1]]) as Real
            };
            data[p * b + k] = v;
        }
    }
    HsiCube::new(Tensor::new([m, n, b], data)?, format!("envi:{}", data_path.display()))
}
