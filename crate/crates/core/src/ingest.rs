//! Remote archive retrieval with digest checking, and label-polygon
//! rasterisation onto the cube grid.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cube_store::GeoTransform;
use crate::error::{Error, IoContext, Result};
use crate::raster::Grid;

/// Polygon in map units; the exterior and every hole are closed rings.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPolygon {
    pub exterior: Vec<(f64, f64)>,
    pub holes: Vec<Vec<(f64, f64)>>,
}

impl LabelPolygon {
    pub fn new(exterior: Vec<(f64, f64)>, holes: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let p = Self { exterior, holes };
        p.validate()?;
        Ok(p)
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            exterior: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)],
            holes: Vec::new(),
        }
    }

    pub fn rings(&self) -> impl Iterator<Item = &[(f64, f64)]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ring) in self.rings().enumerate() {
            let what = if i == 0 { "exterior".to_string() } else { format!("hole {}", i - 1) };
            if ring.len() < 4 {
                return Err(Error::InvalidGeometry(format!(
                    "{what} has {} vertices, need at least 4",
                    ring.len()
                )));
            }
            if ring.first() != ring.last() {
                return Err(Error::InvalidGeometry(format!("{what} is not closed")));
            }
            if ring.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::InvalidGeometry(format!("{what} has non-finite vertices")));
            }
        }
        Ok(())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let mv = |r: &Vec<(f64, f64)>| r.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        Self {
            exterior: mv(&self.exterior),
            holes: self.holes.iter().map(mv).collect(),
        }
    }
}

/// Burns polygons into a `shape = (rows, cols)` mask: a pixel is 1 iff its
/// centre lies inside some polygon under the even-odd rule.
///
/// Each scanline runs through pixel centres; an edge is crossed when exactly
/// one of its endpoints lies strictly below the line, and a span `[a, b)`
/// includes centres on its left boundary but not on its right one.
pub fn rasterize_mask(polygons: &[LabelPolygon], gt: &GeoTransform, shape: (usize, usize)) -> Result<Grid<u8>> {
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidSpec(format!("mask shape {rows}x{cols} is empty")));
    }
    gt.validate()?;
    for p in polygons {
        p.validate()?;
    }
    let mut mask = Grid::filled(rows, cols, 0u8);
    // vertices in fractional pixel coordinates (col, row)
    let to_px = |&(x, y): &(f64, f64)| ((x - gt.origin_x) / gt.pixel_w, (y - gt.origin_y) / gt.pixel_h);
    let mut xs = Vec::new();
    for poly in polygons {
        let rings: Vec<Vec<(f64, f64)>> = poly.rings().map(|r| r.iter().map(to_px).collect()).collect();
        let (lo, hi) = rings
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, r)| (lo.min(r), hi.max(r)));
        let first_row = (lo - 0.5).ceil().max(0.0) as usize;
        let last_row = ((hi - 0.5).floor().min(rows as f64 - 1.0)).max(-1.0);
        if last_row < 0.0 {
            continue;
        }
        for row in first_row..=last_row as usize {
            let yc = row as f64 + 0.5;
            xs.clear();
            for ring in &rings {
                for e in ring.windows(2) {
                    let ((x0, y0), (x1, y1)) = (e[0], e[1]);
                    if (y0 > yc) != (y1 > yc) {
                        xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
                    }
                }
            }
            xs.sort_by(f64::total_cmp);
            for span in xs.chunks_exact(2) {
                let start = (span[0] - 0.5).ceil().max(0.0);
                let end = (span[1] - 0.5).ceil().min(cols as f64);
                if end <= start {
                    continue;
                }
                for col in start as usize..end as usize {
                    mask.set(row, col, 1);
                }
            }
        }
    }
    Ok(mask)
}

fn ring_from_json(v: &Value) -> Result<Vec<(f64, f64)>> {
    let pts = v
        .as_array()
        .ok_or_else(|| Error::InvalidGeometry("ring is not an array".into()))?;
    pts.iter()
        .map(|p| match p.as_array().map(Vec::as_slice) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => Err(Error::InvalidGeometry(format!("non-numeric vertex {p}"))),
            },
            _ => Err(Error::InvalidGeometry(format!("bad vertex {p}"))),
        })
        .collect()
}

fn polygon_from_json(coords: &Value) -> Result<LabelPolygon> {
    let rings = coords
        .as_array()
        .ok_or_else(|| Error::InvalidGeometry("polygon coordinates are not an array".into()))?;
    let mut rings = rings.iter().map(ring_from_json);
    let exterior = rings
        .next()
        .ok_or_else(|| Error::InvalidGeometry("polygon without rings".into()))??;
    let holes = rings.collect::<Result<Vec<_>>>()?;
    LabelPolygon::new(exterior, holes)
}

fn collect_geometry(v: &Value, out: &mut Vec<LabelPolygon>) -> Result<()> {
    match v.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => {
            for f in v
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::InvalidGeometry("FeatureCollection without features".into()))?
            {
                collect_geometry(f, out)?;
            }
        }
        Some("Feature") => match v.get("geometry") {
            Some(Value::Null) | None => {}
            Some(g) => collect_geometry(g, out)?,
        },
        Some("Polygon") => {
            out.push(polygon_from_json(v.get("coordinates").unwrap_or(&Value::Null))?);
        }
        Some("MultiPolygon") => {
            for p in v
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::InvalidGeometry("MultiPolygon without coordinates".into()))?
            {
                out.push(polygon_from_json(p)?);
            }
        }
        other => {
            return Err(Error::InvalidGeometry(format!(
                "unsupported geometry type {other:?}"
            )))
        }
    }
    Ok(())
}

/// Parses Polygon / MultiPolygon geometries from GeoJSON-like text
/// (bare geometry, Feature or FeatureCollection). Properties are ignored.
pub fn parse_polygons(text: &str) -> Result<Vec<LabelPolygon>> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| Error::InvalidGeometry(format!("not valid JSON: {e}")))?;
    let mut out = Vec::new();
    collect_geometry(&v, &mut out)?;
    Ok(out)
}

pub fn read_polygons(path: &Path) -> Result<Vec<LabelPolygon>> {
    parse_polygons(&fs::read_to_string(path).at(path)?)
}

/// Lowercase hex SHA-256 of everything `reader` yields.
pub fn sha256_hex(mut reader: impl Read) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    sha256_hex(File::open(path).at(path)?).at(path)
}

struct DestLock(PathBuf);

impl DestLock {
    fn acquire(dest: &Path) -> Result<Self> {
        let mut name = dest.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        let path = dest.with_file_name(name);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::Fetch(format!("{} is locked ({e})", dest.display())))?;
        Ok(Self(path))
    }
}

impl Drop for DestLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn open_source(url: &str) -> Result<Box<dyn Read>> {
    if let Some(path) = url.strip_prefix("file://") {
        let f = File::open(path).map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        return Ok(Box::new(f));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        let resp = ureq::get(url)
            .call()
            .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        return Ok(Box::new(resp.into_body().into_reader()));
    }
    Err(Error::Fetch(format!("unsupported URL scheme in {url:?}")))
}

/// Ensures `dest` holds the file at `url` with the given SHA-256 digest.
///
/// A file already at `dest` with a matching digest is returned without any
/// network access. Otherwise the download goes to a sibling `.part` file and
/// is renamed into place only after its digest checks out. A `.lock` file
/// next to `dest` keeps concurrent fetches of the same path apart.
pub fn fetch_verify(url: &str, sha256: &str, dest: &Path) -> Result<PathBuf> {
    let expected = sha256.trim().to_ascii_lowercase();
    if expected.len() != 64 || !expected.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::InvalidSpec(format!("{sha256:?} is not a SHA-256 hex digest")));
    }
    if dest.is_file() && sha256_file(dest)? == expected {
        return Ok(dest.to_path_buf());
    }
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let _lock = DestLock::acquire(dest)?;
    let mut part_name = dest.file_name().unwrap_or_default().to_os_string();
    part_name.push(".part");
    let part = dest.with_file_name(part_name);

    let mut src = open_source(url)?;
    let mut out = File::create(&part).at(&part)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = src
            .read(&mut buf)
            .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        out.write_all(&buf[..n]).at(&part)?;
    }
    out.sync_all().at(&part)?;
    drop(out);
    let actual = hex::encode(hasher.finalize());
    if actual != expected {
        let _ = fs::remove_file(&part);
        return Err(Error::Integrity {
            path: dest.to_path_buf(),
            expected,
            actual,
        });
    }
    fs::rename(&part, dest).at(dest)?;
    Ok(dest.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMPTY_SHA: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    fn unit_gt() -> GeoTransform {
        // north-up unit pixels with the origin at map (0, 4)
        GeoTransform::new(0.0, 4.0, 1.0, -1.0).unwrap()
    }

    fn ones(m: &Grid<u8>) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                if m.get(r, c) == 1 {
                    v.push((r, c));
                }
            }
        }
        v
    }

    #[test]
    fn square_covers_exactly_the_two_by_two_block() {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let m = rasterize_mask(&[LabelPolygon::rect(0.0, 0.0, 2.0, 2.0)], &gt, (4, 4)).unwrap();
        assert_eq!(ones(&m), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn north_up_grid_flips_rows() {
        let m = rasterize_mask(&[LabelPolygon::rect(0.0, 0.0, 2.0, 2.0)], &unit_gt(), (4, 4)).unwrap();
        assert_eq!(ones(&m), vec![(2, 0), (2, 1), (3, 0), (3, 1)]);
    }

    #[test]
    fn empty_polygon_list_gives_zero_mask() {
        let m = rasterize_mask(&[], &unit_gt(), (3, 5)).unwrap();
        assert!(m.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn hole_is_subtracted() {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let outer = LabelPolygon::rect(0.0, 0.0, 4.0, 4.0);
        let hole = LabelPolygon::rect(1.0, 1.0, 3.0, 3.0).exterior;
        let p = LabelPolygon::new(outer.exterior, vec![hole]).unwrap();
        let m = rasterize_mask(&[p], &gt, (4, 4)).unwrap();
        #[rustfmt::skip]
        let want = [
            1, 1, 1, 1,
            1, 0, 0, 1,
            1, 0, 0, 1,
            1, 1, 1, 1,
        ];
        assert_eq!(m.data(), &want);
    }

    #[test]
    fn centres_on_edges_follow_half_open_rule() {
        // left/top boundaries through centres are inside, right/bottom are not
        let gt = GeoTransform::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let m = rasterize_mask(&[LabelPolygon::rect(0.5, 0.5, 2.5, 2.5)], &gt, (4, 4)).unwrap();
        assert_eq!(ones(&m), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        // two abutting squares never double count and leave no gap
        let a = LabelPolygon::rect(0.5, 0.5, 1.5, 3.5);
        let b = LabelPolygon::rect(1.5, 0.5, 2.5, 3.5);
        let m = rasterize_mask(&[a, b], &gt, (4, 4)).unwrap();
        assert_eq!(ones(&m).len(), 6);
    }

    #[test]
    fn triangle_matches_point_in_polygon_by_hand() {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let tri = LabelPolygon::new(vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0), (0.0, 0.0)], vec![]).unwrap();
        let m = rasterize_mask(&[tri], &gt, (4, 4)).unwrap();
        // centre (c+0.5, r+0.5) is inside iff c + r + 1 < 4
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), (c + r + 1 < 4) as u8, "pixel {r},{c}");
            }
        }
    }

    #[test]
    fn degenerate_and_open_rings_are_rejected() {
        let tri = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 0.0)];
        assert!(matches!(LabelPolygon::new(tri, vec![]), Err(Error::InvalidGeometry(_))));
        let open = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(matches!(LabelPolygon::new(open, vec![]), Err(Error::InvalidGeometry(_))));
        let bad = LabelPolygon {
            exterior: vec![(0.0, 0.0), (1.0, 1.0), (0.0, 0.0)],
            holes: vec![],
        };
        assert!(matches!(
            rasterize_mask(&[bad], &unit_gt(), (2, 2)),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn geojson_polygon_and_multipolygon() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":1},"geometry":
              {"type":"Polygon","coordinates":[[[0,0],[2,0],[2,2],[0,2],[0,0]]]}},
            {"type":"Feature","properties":{},"geometry":
              {"type":"MultiPolygon","coordinates":[
                [[[3,3],[4,3],[4,4],[3,4],[3,3]]],
                [[[5,5],[6,5],[6,6],[5,6],[5,5]],[[5.2,5.2],[5.8,5.2],[5.8,5.8],[5.2,5.8],[5.2,5.2]]]
              ]}}]}"#;
        let polys = parse_polygons(text).unwrap();
        assert_eq!(polys.len(), 3);
        assert_eq!(polys[2].holes.len(), 1);
        assert!(parse_polygons(r#"{"type":"Point","coordinates":[0,0]}"#).is_err());
    }

    #[test]
    fn empty_file_digest_verifies() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("empty.bin");
        fs::write(&src, b"").unwrap();
        assert_eq!(sha256_file(&src).unwrap(), EMPTY_SHA);
        let dest = tmp.path().join("out/empty.bin");
        let url = format!("file://{}", src.display());
        let got = fetch_verify(&url, EMPTY_SHA, &dest).unwrap();
        assert_eq!(got, dest);
        assert_eq!(fs::read(&dest).unwrap().len(), 0);
        assert!(!dest.with_file_name("empty.bin.lock").exists());
    }

    #[test]
    fn cached_file_short_circuits_network() {
        let tmp = tempfile::tempdir().unwrap();
        let dest = tmp.path().join("cube.zip");
        fs::write(&dest, b"hello").unwrap();
        let digest = sha256_file(&dest).unwrap();
        // an unreachable URL proves no fetch is attempted
        let got = fetch_verify("http://127.0.0.1:9/cube.zip", &digest, &dest).unwrap();
        assert_eq!(got, dest);
    }

    #[test]
    fn wrong_digest_is_an_integrity_error() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("payload");
        fs::write(&src, b"payload").unwrap();
        let dest = tmp.path().join("dest");
        let err = fetch_verify(&format!("file://{}", src.display()), EMPTY_SHA, &dest).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }));
        assert!(!dest.exists());
    }

    #[test]
    fn unreachable_source_without_cache_is_fetch_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dest = tmp.path().join("dest");
        let err = fetch_verify("http://127.0.0.1:9/nothing", EMPTY_SHA, &dest).unwrap_err();
        assert!(matches!(err, Error::Fetch(_)), "{err}");
        let err = fetch_verify("ftp://example/x", EMPTY_SHA, &dest).unwrap_err();
        assert!(matches!(err, Error::Fetch(_)));
        assert!(matches!(
            fetch_verify("file:///x", "abc", &dest),
            Err(Error::InvalidSpec(_))
        ));
    }
}
