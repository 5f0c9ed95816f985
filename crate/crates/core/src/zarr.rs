//! Uncompressed, C-ordered Zarr v2 arrays and groups.
//!
//! Only two dtypes are supported (`<f4` and `|u1`), the compressor must be
//! `null`, and chunk keys use `.` as the separator. Edge chunks are stored
//! at full chunk size, padded with the fill value, exactly as zarr-python
//! writes them.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, IoContext, Result};

pub const ZGROUP: &str = ".zgroup";
pub const ZARRAY: &str = ".zarray";
pub const ZATTRS: &str = ".zattrs";
/// xarray's attribute naming the dimensions of an array.
pub const DIMS_ATTR: &str = "_ARRAY_DIMENSIONS";

pub const F32_FILL: f32 = 0.0;
pub const U8_FILL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn zarr_code(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::U8 => "|u1",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    fn parse(code: &str) -> Result<Self> {
        match code {
            "<f4" => Ok(DType::F32),
            "|u1" | "<u1" => Ok(DType::U8),
            other => Err(Error::Unsupported(format!("dtype {other}"))),
        }
    }
}

/// Dense array payload in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            ArrayData::F32(v) => Some(v),
            ArrayData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match self {
            ArrayData::U8(v) => Some(v),
            ArrayData::F32(_) => None,
        }
    }

    pub fn into_f32(self) -> Option<Vec<f32>> {
        match self {
            ArrayData::F32(v) => Some(v),
            ArrayData::U8(_) => None,
        }
    }

    pub fn into_u8(self) -> Option<Vec<u8>> {
        match self {
            ArrayData::U8(v) => Some(v),
            ArrayData::F32(_) => None,
        }
    }

    /// Little-endian byte image, as stored in chunk files.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayMeta {
    pub shape: Vec<usize>,
    pub chunks: Vec<usize>,
    pub dtype: DType,
    pub dim_names: Vec<String>,
}

impl ArrayMeta {
    pub fn validate(&self) -> Result<()> {
        let nd = self.shape.len();
        if nd == 0 {
            return Err(Error::InvalidSpec("zero-dimensional arrays are not supported".into()));
        }
        if self.chunks.len() != nd || self.dim_names.len() != nd {
            return Err(Error::InvalidSpec(format!(
                "shape {:?}, chunks {:?} and dims {:?} disagree in rank",
                self.shape, self.chunks, self.dim_names
            )));
        }
        for (i, (&len, &ch)) in self.shape.iter().zip(&self.chunks).enumerate() {
            if len == 0 || ch == 0 || ch > len {
                return Err(Error::InvalidSpec(format!(
                    "axis {i}: chunk {ch} must lie in 1..={len}"
                )));
            }
        }
        // every later index and byte-offset computation stays below this bound
        let bytes = self
            .shape
            .iter()
            .try_fold(self.dtype.size(), |acc, &len| acc.checked_mul(len));
        if bytes.is_none_or(|b| b > isize::MAX as usize) {
            return Err(Error::InvalidSpec(format!("shape {:?} is too large to address", self.shape)));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of chunks along each axis.
    pub fn chunk_grid(&self) -> Vec<usize> {
        self.shape
            .iter()
            .zip(&self.chunks)
            .map(|(&s, &c)| s.div_ceil(c))
            .collect()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunk_grid().iter().product()
    }

    fn to_json(&self) -> Value {
        let fill = match self.dtype {
            DType::F32 => json!(F32_FILL as f64),
            DType::U8 => json!(U8_FILL),
        };
        json!({
            "chunks": self.chunks,
            "compressor": null,
            "dtype": self.dtype.zarr_code(),
            "fill_value": fill,
            "filters": null,
            "order": "C",
            "shape": self.shape,
            "zarr_format": 2,
        })
    }
}

/// Serialises JSON the way zarr-python does: sorted keys, 4-space indent.
pub fn to_json_bytes(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    serde::Serialize::serialize(v, &mut ser).expect("in-memory json");
    out
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).at(path)
}

pub fn write_group(dir: &Path, attrs: &Map<String, Value>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let zg = dir.join(ZGROUP);
    fs::write(&zg, to_json_bytes(&json!({ "zarr_format": 2 }))).at(&zg)?;
    write_attrs(dir, attrs)
}

pub fn write_attrs(dir: &Path, attrs: &Map<String, Value>) -> Result<()> {
    let za = dir.join(ZATTRS);
    fs::write(&za, to_json_bytes(&Value::Object(attrs.clone()))).at(&za)
}

pub fn is_group(dir: &Path) -> bool {
    dir.join(ZGROUP).is_file()
}

pub fn read_group_attrs(dir: &Path) -> Result<Map<String, Value>> {
    let zg = dir.join(ZGROUP);
    match read_json(&zg)?.get("zarr_format") {
        Some(v) if v == 2 => {}
        other => {
            return Err(Error::Unsupported(format!(
                "{}: zarr_format {other:?}",
                zg.display()
            )))
        }
    }
    let za = dir.join(ZATTRS);
    if !za.exists() {
        return Ok(Map::new());
    }
    match read_json(&za)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Corrupt(format!("{} is not a JSON object", za.display()))),
    }
}

pub fn read_array_meta(dir: &Path) -> Result<ArrayMeta> {
    let path = dir.join(ZARRAY);
    let v = read_json(&path)?;
    let field = |k: &str| {
        v.get(k)
            .ok_or_else(|| Error::Corrupt(format!("{}: missing {k}", path.display())))
    };
    if field("zarr_format")? != 2 {
        return Err(Error::Unsupported(format!("{}: not zarr v2", path.display())));
    }
    if !field("compressor")?.is_null() {
        return Err(Error::Unsupported(format!("{}: compressed chunks", path.display())));
    }
    if v.get("filters").is_some_and(|f| !f.is_null()) {
        return Err(Error::Unsupported(format!("{}: filters", path.display())));
    }
    if field("order")? != "C" {
        return Err(Error::Unsupported(format!("{}: order must be C", path.display())));
    }
    if let Some(sep) = v.get("dimension_separator") {
        if sep != "." {
            return Err(Error::Unsupported(format!("{}: separator {sep}", path.display())));
        }
    }
    let dims = |k: &str| -> Result<Vec<usize>> {
        field(k)?
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_u64().map(|u| u as usize)).collect())
            .ok_or_else(|| Error::Corrupt(format!("{}: bad {k}", path.display())))
    };
    let shape = dims("shape")?;
    let chunks = dims("chunks")?;
    let dtype = DType::parse(
        field("dtype")?
            .as_str()
            .ok_or_else(|| Error::Corrupt(format!("{}: dtype", path.display())))?,
    )?;
    let dim_names = match fs::read(dir.join(ZATTRS)) {
        Ok(bytes) => {
            let attrs: Value = serde_json::from_slice(&bytes).at(dir.join(ZATTRS))?;
            attrs
                .get(DIMS_ATTR)
                .and_then(|d| d.as_array())
                .and_then(|a| a.iter().map(|x| x.as_str().map(String::from)).collect())
                .unwrap_or_else(|| (0..shape.len()).map(|i| format!("dim_{i}")).collect())
        }
        Err(_) => (0..shape.len()).map(|i| format!("dim_{i}")).collect(),
    };
    let meta = ArrayMeta {
        shape,
        chunks,
        dtype,
        dim_names,
    };
    meta.validate()?;
    Ok(meta)
}

fn chunk_key(idx: &[usize]) -> String {
    idx.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(".")
}

/// Row-major walk over every index of `extent` except the last axis.
fn for_each_row(extent: &[usize], mut f: impl FnMut(&[usize])) {
    let outer = &extent[..extent.len() - 1];
    if outer.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; outer.len()];
    loop {
        f(&idx);
        let mut ax = outer.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < outer[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn flat(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + i)
}

/// Copies the hyper-rectangle `src_lo + extent` of `src` into `dst_lo + extent` of `dst`.
fn copy_block<T: Copy>(
    src: &[T],
    src_shape: &[usize],
    src_lo: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    dst_lo: &[usize],
    extent: &[usize],
) {
    let nd = extent.len();
    let run = extent[nd - 1];
    let mut si = vec![0; nd];
    let mut di = vec![0; nd];
    for_each_row(extent, |outer| {
        for a in 0..nd - 1 {
            si[a] = src_lo[a] + outer[a];
            di[a] = dst_lo[a] + outer[a];
        }
        si[nd - 1] = src_lo[nd - 1];
        di[nd - 1] = dst_lo[nd - 1];
        let s = flat(&si, src_shape);
        let d = flat(&di, dst_shape);
        dst[d..d + run].copy_from_slice(&src[s..s + run]);
    });
}

/// Writes `.zarray`, `.zattrs` and every chunk of `data` under `dir`.
pub fn write_array(dir: &Path, meta: &ArrayMeta, data: &ArrayData) -> Result<()> {
    meta.validate()?;
    if data.len() != meta.numel() {
        return Err(Error::DimMismatch(format!(
            "array of shape {:?} needs {} values, got {}",
            meta.shape,
            meta.numel(),
            data.len()
        )));
    }
    if data.dtype() != meta.dtype {
        return Err(Error::InvalidSpec("payload dtype differs from metadata".into()));
    }
    fs::create_dir_all(dir).at(dir)?;
    let za = dir.join(ZARRAY);
    fs::write(&za, to_json_bytes(&meta.to_json())).at(&za)?;
    let mut attrs = Map::new();
    attrs.insert(DIMS_ATTR.into(), json!(meta.dim_names));
    write_attrs(dir, &attrs)?;

    match data {
        ArrayData::F32(v) => write_chunks(dir, meta, v, F32_FILL, |buf: &[f32]| {
            buf.iter().flat_map(|x| x.to_le_bytes()).collect()
        }),
        ArrayData::U8(v) => write_chunks(dir, meta, v, U8_FILL, |buf: &[u8]| buf.to_vec()),
    }
}

fn write_chunks<T: Copy>(
    dir: &Path,
    meta: &ArrayMeta,
    data: &[T],
    fill: T,
    encode: impl Fn(&[T]) -> Vec<u8>,
) -> Result<()> {
    let grid = meta.chunk_grid();
    let nd = grid.len();
    let chunk_len: usize = meta.chunks.iter().product();
    let mut buf = vec![fill; chunk_len];
    let mut cidx = vec![0usize; nd];
    for _ in 0..meta.chunk_count() {
        let lo: Vec<usize> = cidx.iter().zip(&meta.chunks).map(|(&i, &c)| i * c).collect();
        let extent: Vec<usize> = (0..nd)
            .map(|a| meta.chunks[a].min(meta.shape[a] - lo[a]))
            .collect();
        if extent != meta.chunks {
            buf.fill(fill);
        }
        copy_block(data, &meta.shape, &lo, &mut buf, &meta.chunks, &vec![0; nd], &extent);
        let path = dir.join(chunk_key(&cidx));
        fs::write(&path, encode(&buf)).at(&path)?;
        // advance the chunk index in row-major order
        for a in (0..nd).rev() {
            cidx[a] += 1;
            if cidx[a] < grid[a] {
                break;
            }
            cidx[a] = 0;
        }
    }
    Ok(())
}

/// Checks a per-axis window against `shape`; `None` means the full extent.
pub fn resolve_window(shape: &[usize], window: Option<&[Range<usize>]>) -> Result<Vec<Range<usize>>> {
    match window {
        None => Ok(shape.iter().map(|&s| 0..s).collect()),
        Some(w) => {
            if w.len() != shape.len() {
                return Err(Error::OutOfBounds(format!(
                    "window has {} axes, array has {}",
                    w.len(),
                    shape.len()
                )));
            }
            for (a, (r, &s)) in w.iter().zip(shape).enumerate() {
                if r.start >= r.end || r.end > s {
                    return Err(Error::OutOfBounds(format!(
                        "axis {a}: {}..{} not inside 0..{s}",
                        r.start, r.end
                    )));
                }
            }
            Ok(w.to_vec())
        }
    }
}

/// Reads `window` (or the full array) into a dense row-major buffer.
pub fn read_array(dir: &Path, meta: &ArrayMeta, window: Option<&[Range<usize>]>) -> Result<ArrayData> {
    let win = resolve_window(&meta.shape, window)?;
    match meta.dtype {
        DType::F32 => read_chunks(dir, meta, &win, F32_FILL, |b: &[u8]| {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        })
        .map(ArrayData::F32),
        DType::U8 => read_chunks(dir, meta, &win, U8_FILL, |b: &[u8]| b.to_vec()).map(ArrayData::U8),
    }
}

fn read_chunks<T: Copy>(
    dir: &Path,
    meta: &ArrayMeta,
    win: &[Range<usize>],
    fill: T,
    decode: impl Fn(&[u8]) -> Vec<T>,
) -> Result<Vec<T>> {
    let nd = meta.shape.len();
    let out_shape: Vec<usize> = win.iter().map(|r| r.end - r.start).collect();
    let mut out = vec![fill; out_shape.iter().product()];
    let first: Vec<usize> = (0..nd).map(|a| win[a].start / meta.chunks[a]).collect();
    let last: Vec<usize> = (0..nd).map(|a| (win[a].end - 1) / meta.chunks[a]).collect();
    let span: Vec<usize> = (0..nd).map(|a| last[a] - first[a] + 1).collect();
    let chunk_len: usize = meta.chunks.iter().product();
    let total: usize = span.iter().product();
    let mut rel = vec![0usize; nd];
    for _ in 0..total {
        let cidx: Vec<usize> = (0..nd).map(|a| first[a] + rel[a]).collect();
        let path = dir.join(chunk_key(&cidx));
        let chunk_lo: Vec<usize> = (0..nd).map(|a| cidx[a] * meta.chunks[a]).collect();
        let lo: Vec<usize> = (0..nd).map(|a| chunk_lo[a].max(win[a].start)).collect();
        let hi: Vec<usize> = (0..nd)
            .map(|a| (chunk_lo[a] + meta.chunks[a]).min(win[a].end))
            .collect();
        let extent: Vec<usize> = (0..nd).map(|a| hi[a] - lo[a]).collect();
        match fs::read(&path) {
            Ok(bytes) => {
                if bytes.len() != chunk_len * meta.dtype.size() {
                    return Err(Error::Corrupt(format!(
                        "{}: {} bytes, expected {}",
                        path.display(),
                        bytes.len(),
                        chunk_len * meta.dtype.size()
                    )));
                }
                let chunk = decode(&bytes);
                let src_lo: Vec<usize> = (0..nd).map(|a| lo[a] - chunk_lo[a]).collect();
                let dst_lo: Vec<usize> = (0..nd).map(|a| lo[a] - win[a].start).collect();
                copy_block(&chunk, &meta.chunks, &src_lo, &mut out, &out_shape, &dst_lo, &extent);
            }
            // absent chunks read as fill_value
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e).at(&path),
        }
        for a in (0..nd).rev() {
            rel[a] += 1;
            if rel[a] < span[a] {
                break;
            }
            rel[a] = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zarray_json_layout() {
        let meta = ArrayMeta {
            shape: vec![2, 4, 4],
            chunks: vec![1, 4, 4],
            dtype: DType::F32,
            dim_names: vec!["timestep".into(), "y".into(), "x".into()],
        };
        let text = String::from_utf8(to_json_bytes(&meta.to_json())).unwrap();
        let want = r#"{
    "chunks": [
        1,
        4,
        4
    ],
    "compressor": null,
    "dtype": "<f4",
    "fill_value": 0.0,
    "filters": null,
    "order": "C",
    "shape": [
        2,
        4,
        4
    ],
    "zarr_format": 2
}"#;
        assert_eq!(text, want);
    }

    #[test]
    fn edge_chunks_are_padded_with_fill() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ArrayMeta {
            shape: vec![3],
            chunks: vec![2],
            dtype: DType::U8,
            dim_names: vec!["x".into()],
        };
        write_array(dir.path(), &meta, &ArrayData::U8(vec![0, 1, 1])).unwrap();
        assert_eq!(fs::read(dir.path().join("0")).unwrap(), vec![0, 1]);
        assert_eq!(fs::read(dir.path().join("1")).unwrap(), vec![1, 255]);
    }

    #[test]
    fn missing_chunk_reads_as_fill() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ArrayMeta {
            shape: vec![2, 2],
            chunks: vec![1, 2],
            dtype: DType::F32,
            dim_names: vec!["y".into(), "x".into()],
        };
        write_array(dir.path(), &meta, &ArrayData::F32(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        fs::remove_file(dir.path().join("1.0")).unwrap();
        let back = read_array(dir.path(), &meta, None).unwrap();
        assert_eq!(back, ArrayData::F32(vec![1.0, 2.0, 0.0, 0.0]));
    }

    #[test]
    fn unaddressable_shapes_are_rejected() {
        let meta = ArrayMeta {
            shape: vec![1 << 40, 1 << 40],
            chunks: vec![1, 1],
            dtype: DType::U8,
            dim_names: vec!["y".into(), "x".into()],
        };
        assert!(matches!(meta.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn compressed_arrays_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = json!({"chunks":[1],"compressor":{"id":"blosc"},"dtype":"<f4","fill_value":0.0,
                       "filters":null,"order":"C","shape":[1],"zarr_format":2});
        fs::write(dir.path().join(ZARRAY), to_json_bytes(&v)).unwrap();
        assert!(matches!(read_array_meta(dir.path()), Err(Error::Unsupported(_))));
    }
}
