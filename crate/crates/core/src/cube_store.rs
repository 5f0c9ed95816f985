//! Multi-variable datacubes over `(timepair, timestep, y, x)`, persisted as
//! a Zarr v2 group (see [`crate::zarr`] for the on-disk subset).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::error::{Error, IoContext, Result};
use crate::raster::Grid;
use crate::zarr::{self, ArrayData, ArrayMeta, DType};

/// Well-known variable names.
pub mod vars {
    pub const VV: &str = "vv";
    pub const VH: &str = "vh";
    pub const DEM: &str = "dem";
    pub const SLOPE: &str = "slope";
    pub const ASPECT: &str = "aspect";
    pub const CURVATURE: &str = "curvature";
    pub const LABEL: &str = "label";
    pub const IFG_RE: &str = "interferogram_re";
    pub const IFG_IM: &str = "interferogram_im";
    pub const COHERENCE: &str = "coherence";
    /// Co-registered single-look complex stack, `(timestep, y, x)`.
    pub const SLC_RE: &str = "slc_re";
    pub const SLC_IM: &str = "slc_im";
}

/// Group attribute keys.
pub mod attrs {
    pub const GEOTRANSFORM: &str = "geotransform";
    pub const DIMS: &str = "dims";
    pub const EVENT_INDEX: &str = "event_index";
    pub const EVENT_DATE: &str = "event_date";
    pub const CRS: &str = "crs";
}

/// Cube dimensions in their canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dim {
    Timepair,
    Timestep,
    Y,
    X,
}

impl Dim {
    pub const ALL: [Dim; 4] = [Dim::Timepair, Dim::Timestep, Dim::Y, Dim::X];

    pub fn name(self) -> &'static str {
        match self {
            Dim::Timepair => "timepair",
            Dim::Timestep => "timestep",
            Dim::Y => "y",
            Dim::X => "x",
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dim::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown dimension {s:?}")))
    }
}

/// Affine pixel → map transform of a north-up (or south-up) grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_w: 1.0,
            pixel_h: -1.0,
        }
    }
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_w: f64, pixel_h: f64) -> Result<Self> {
        let gt = Self {
            origin_x,
            origin_y,
            pixel_w,
            pixel_h,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.origin_x, self.origin_y, self.pixel_w, self.pixel_h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.pixel_w <= 0.0 || self.pixel_h == 0.0 {
            return Err(Error::InvalidSpec(format!(
                "geotransform needs finite values, pixel_w > 0 and pixel_h != 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Map coordinates of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_w,
            self.origin_y + (row as f64 + 0.5) * self.pixel_h,
        )
    }

    /// GDAL ordering: `origin_x pixel_w 0 origin_y 0 pixel_h`.
    pub fn to_attr(&self) -> String {
        format!(
            "{} {} 0 {} 0 {}",
            self.origin_x, self.pixel_w, self.origin_y, self.pixel_h
        )
    }

    pub fn from_attr(s: &str) -> Result<Self> {
        let nums: Vec<f64> = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidSpec(format!("geotransform {s:?}: {e}")))?;
        match nums[..] {
            [ox, pw, rx, oy, ry, ph] => {
                if rx != 0.0 || ry != 0.0 {
                    return Err(Error::Unsupported(format!("rotated geotransform {s:?}")));
                }
                GeoTransform::new(ox, oy, pw, ph)
            }
            _ => Err(Error::InvalidSpec(format!(
                "geotransform needs six numbers, got {s:?}"
            ))),
        }
    }
}

/// A named variable with its payload, used for writes.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterVar {
    pub name: String,
    pub dims: Vec<Dim>,
    pub chunks: Vec<usize>,
    pub data: ArrayData,
}

impl RasterVar {
    pub fn new(name: impl Into<String>, dims: Vec<Dim>, chunks: Vec<usize>, data: ArrayData) -> Self {
        Self {
            name: name.into(),
            dims,
            chunks,
            data,
        }
    }

    /// `(y, x)` f32 variable chunked as a whole grid.
    pub fn grid_f32(name: impl Into<String>, grid: &Grid<f32>) -> Self {
        let (r, c) = grid.shape();
        Self::new(name, vec![Dim::Y, Dim::X], vec![r, c], ArrayData::F32(grid.data().to_vec()))
    }

    /// `(y, x)` u8 mask variable chunked as a whole grid.
    pub fn grid_u8(name: impl Into<String>, grid: &Grid<u8>) -> Self {
        let (r, c) = grid.shape();
        Self::new(name, vec![Dim::Y, Dim::X], vec![r, c], ArrayData::U8(grid.data().to_vec()))
    }

    /// `(lead, y, x)` f32 stack chunked one leading slice per chunk.
    pub fn stack_f32(name: impl Into<String>, lead: Dim, layers: &[Grid<f32>]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidSpec("empty stack".into()))?;
        let (r, c) = first.shape();
        let mut data = Vec::with_capacity(layers.len() * r * c);
        for l in layers {
            if l.shape() != (r, c) {
                return Err(Error::DimMismatch("stack layers differ in shape".into()));
            }
            data.extend_from_slice(l.data());
        }
        Ok(Self::new(
            name,
            vec![lead, Dim::Y, Dim::X],
            vec![1, r, c],
            ArrayData::F32(data),
        ))
    }
}

/// Metadata of a stored variable.
#[derive(Clone, Debug, PartialEq)]
pub struct VarInfo {
    pub name: String,
    pub dims: Vec<Dim>,
    pub meta: ArrayMeta,
}

impl VarInfo {
    pub fn shape(&self) -> &[usize] {
        &self.meta.shape
    }

    pub fn dtype(&self) -> DType {
        self.meta.dtype
    }
}

/// Handle to an on-disk datacube.
///
/// Reads take `&self` and may run concurrently; writes take `&mut self`.
#[derive(Clone, Debug)]
pub struct Datacube {
    root: PathBuf,
    dims: Vec<(Dim, usize)>,
    geotransform: GeoTransform,
    attrs: BTreeMap<String, String>,
    vars: BTreeMap<String, VarInfo>,
}

fn validate_dims(dims: &[(Dim, usize)]) -> Result<()> {
    let names: Vec<Dim> = dims.iter().map(|d| d.0).collect();
    if !names.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidSpec(format!(
            "dims must be a duplicate-free subsequence of (timepair, timestep, y, x), got {names:?}"
        )));
    }
    if !names.contains(&Dim::Y) || !names.contains(&Dim::X) {
        return Err(Error::InvalidSpec("cube needs both y and x dimensions".into()));
    }
    if let Some((d, _)) = dims.iter().find(|(_, len)| *len == 0) {
        return Err(Error::InvalidSpec(format!("dimension {d} has length 0")));
    }
    Ok(())
}

fn format_dims(dims: &[(Dim, usize)]) -> String {
    dims.iter()
        .map(|(d, l)| format!("{d}={l}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses `"timestep=18,y=4398,x=5382"`.
pub fn parse_dims(s: &str) -> Result<Vec<(Dim, usize)>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|tok| {
            let (name, len) = tok
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("dim spec {tok:?} lacks '='")))?;
            let len = len
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidSpec(format!("dim spec {tok:?}: {e}")))?;
            Ok((name.trim().parse::<Dim>()?, len))
        })
        .collect()
}

impl Datacube {
    /// Creates an empty cube. `path` must not exist or be an empty directory.
    pub fn create(path: impl AsRef<Path>, dims: &[(Dim, usize)], geotransform: GeoTransform) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        validate_dims(dims)?;
        geotransform.validate()?;
        if root.exists() {
            let non_empty = !root.is_dir() || fs::read_dir(&root).at(&root)?.next().is_some();
            if non_empty {
                return Err(Error::AlreadyExists(root));
            }
        }
        let mut cube = Self {
            root,
            dims: dims.to_vec(),
            geotransform,
            attrs: BTreeMap::new(),
            vars: BTreeMap::new(),
        };
        cube.persist_attrs()?;
        Ok(cube)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        if !zarr::is_group(&root) {
            return Err(Error::NotFound(format!("no zarr group at {}", root.display())));
        }
        let raw = zarr::read_group_attrs(&root)?;
        let mut attrs = BTreeMap::new();
        for (k, v) in raw {
            let s = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            attrs.insert(k, s);
        }
        let geotransform = match attrs.remove(attrs::GEOTRANSFORM) {
            Some(s) => GeoTransform::from_attr(&s)?,
            None => GeoTransform::default(),
        };
        let declared = attrs.remove(attrs::DIMS).map(|s| parse_dims(&s)).transpose()?;

        let mut vars = BTreeMap::new();
        let mut entries: Vec<_> = fs::read_dir(&root)
            .at(&root)?
            .collect::<std::io::Result<Vec<_>>>()
            .at(&root)?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if !p.join(zarr::ZARRAY).is_file() {
                continue;
            }
            let name = e.file_name().to_string_lossy().into_owned();
            let meta = zarr::read_array_meta(&p)?;
            let dims = meta
                .dim_names
                .iter()
                .map(|n| n.parse::<Dim>())
                .collect::<Result<Vec<_>>>()?;
            vars.insert(name.clone(), VarInfo { name, dims, meta });
        }

        let dims = match declared {
            Some(d) => d,
            None => {
                let mut found: BTreeMap<Dim, usize> = BTreeMap::new();
                for v in vars.values() {
                    for (d, &l) in v.dims.iter().zip(&v.meta.shape) {
                        found.insert(*d, l);
                    }
                }
                found.into_iter().collect()
            }
        };
        validate_dims(&dims)?;
        let cube = Self {
            root,
            dims,
            geotransform,
            attrs,
            vars,
        };
        for v in cube.vars.values() {
            cube.check_var_dims(&v.name, &v.dims, &v.meta.shape)?;
        }
        Ok(cube)
    }

    fn persist_attrs(&mut self) -> Result<()> {
        let mut m = Map::new();
        for (k, v) in &self.attrs {
            m.insert(k.clone(), Value::String(v.clone()));
        }
        m.insert(attrs::GEOTRANSFORM.into(), Value::String(self.geotransform.to_attr()));
        m.insert(attrs::DIMS.into(), Value::String(format_dims(&self.dims)));
        zarr::write_group(&self.root, &m)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn dims(&self) -> &[(Dim, usize)] {
        &self.dims
    }

    pub fn dim_len(&self, d: Dim) -> Option<usize> {
        self.dims.iter().find(|(n, _)| *n == d).map(|(_, l)| *l)
    }

    /// `(y, x)` extent.
    pub fn spatial_shape(&self) -> (usize, usize) {
        (
            self.dim_len(Dim::Y).expect("validated"),
            self.dim_len(Dim::X).expect("validated"),
        )
    }

    pub fn geotransform(&self) -> GeoTransform {
        self.geotransform
    }

    pub fn attrs(&self) -> &BTreeMap<String, String> {
        &self.attrs
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    pub fn set_attr(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let key = key.into();
        if key == attrs::GEOTRANSFORM || key == attrs::DIMS {
            return Err(Error::InvalidSpec(format!("{key} is managed by the cube")));
        }
        self.attrs.insert(key, value.into());
        self.persist_attrs()
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn has_var(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn var_info(&self, name: &str) -> Result<&VarInfo> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("variable {name:?}")))
    }

    fn check_var_dims(&self, name: &str, dims: &[Dim], shape: &[usize]) -> Result<()> {
        if !dims.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::DimMismatch(format!(
                "{name}: dims {dims:?} are not a subsequence of (timepair, timestep, y, x)"
            )));
        }
        if dims.len() != shape.len() {
            return Err(Error::DimMismatch(format!("{name}: rank mismatch")));
        }
        for (d, &len) in dims.iter().zip(shape) {
            match self.dim_len(*d) {
                Some(l) if l == len => {}
                Some(l) => {
                    return Err(Error::DimMismatch(format!(
                        "{name}: {d} has length {len}, cube has {l}"
                    )))
                }
                None => return Err(Error::DimMismatch(format!("{name}: cube has no {d} dimension"))),
            }
        }
        Ok(())
    }

    /// Persists `var` (metadata and chunks), replacing any previous version.
    pub fn write_var(&mut self, var: &RasterVar) -> Result<()> {
        if var.name.is_empty()
            || var.name.starts_with('.')
            || var.name.contains(['/', '\\'])
        {
            return Err(Error::InvalidSpec(format!("bad variable name {:?}", var.name)));
        }
        let shape: Vec<usize> = var
            .dims
            .iter()
            .map(|d| {
                self.dim_len(*d)
                    .ok_or_else(|| Error::DimMismatch(format!("{}: cube has no {d} dimension", var.name)))
            })
            .collect::<Result<_>>()?;
        self.check_var_dims(&var.name, &var.dims, &shape)?;
        if let ArrayData::U8(v) = &var.data {
            if let Some(bad) = v.iter().find(|&&b| !matches!(b, 0 | 1 | 255)) {
                return Err(Error::InvalidSpec(format!(
                    "{}: mask value {bad} outside {{0, 1, 255}}",
                    var.name
                )));
            }
        }
        let meta = ArrayMeta {
            shape,
            chunks: var.chunks.clone(),
            dtype: var.data.dtype(),
            dim_names: var.dims.iter().map(|d| d.name().to_string()).collect(),
        };
        meta.validate()?;
        let dir = self.root.join(&var.name);
        if dir.exists() {
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        zarr::write_array(&dir, &meta, &var.data)?;
        self.vars.insert(
            var.name.clone(),
            VarInfo {
                name: var.name.clone(),
                dims: var.dims.clone(),
                meta,
            },
        );
        Ok(())
    }

    /// Reads a variable, optionally restricted to per-dimension ranges.
    pub fn read_var(&self, name: &str, window: Option<&[Range<usize>]>) -> Result<ArrayData> {
        let info = self.var_info(name)?;
        zarr::read_array(&self.root.join(name), &info.meta, window)
    }

    pub fn read_f32(&self, name: &str, window: Option<&[Range<usize>]>) -> Result<Vec<f32>> {
        self.read_var(name, window)?
            .into_f32()
            .ok_or_else(|| Error::InvalidSpec(format!("{name} is not f32")))
    }

    /// Reads a `(y, x)` variable, or one leading-index slice of a
    /// `(lead, y, x)` variable, as a grid.
    pub fn read_grid_f32(&self, name: &str, lead: Option<usize>) -> Result<Grid<f32>> {
        let info = self.var_info(name)?;
        let shape = info.shape().to_vec();
        let (data, r, c) = match (shape.len(), lead) {
            (2, None) => (self.read_f32(name, None)?, shape[0], shape[1]),
            (3, Some(i)) => {
                if i >= shape[0] {
                    return Err(Error::OutOfBounds(format!("{name}: index {i} of {}", shape[0])));
                }
                let w = [i..i + 1, 0..shape[1], 0..shape[2]];
                (self.read_f32(name, Some(&w))?, shape[1], shape[2])
            }
            _ => {
                return Err(Error::DimMismatch(format!(
                    "{name}: shape {shape:?} incompatible with lead index {lead:?}"
                )))
            }
        };
        Ok(Grid::new(r, c, data))
    }

    pub fn read_grid_u8(&self, name: &str) -> Result<Grid<u8>> {
        let info = self.var_info(name)?;
        let shape = info.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::DimMismatch(format!("{name}: expected (y, x), got {shape:?}")));
        }
        let data = self
            .read_var(name, None)?
            .into_u8()
            .ok_or_else(|| Error::InvalidSpec(format!("{name} is not u8")))?;
        Ok(Grid::new(shape[0], shape[1], data))
    }
}
