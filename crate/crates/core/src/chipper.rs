//! Non-overlapping chip extraction, positive-chip filtering, seeded
//! train/test assignment, and chip-set persistence.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::cube_store::{vars, Datacube};
use crate::error::{Error, IoContext, Result};
use crate::preprocess::{raw_channels, Channel, ChannelStats, InputConfig, StatsAccumulator};
use crate::raster::Grid;
use crate::zarr::{self, ArrayData, ArrayMeta, DType};

pub const CHIP_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One square training unit: `(C, size, size)` inputs and a `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub origin: (usize, usize),
    pub size: usize,
    pub channels: usize,
    pub inputs: Vec<f32>,
    pub mask: Vec<u8>,
    pub split: Option<Split>,
}

impl Chip {
    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }
}

/// Origins of every full `chip × chip` tile, row-major; remainders are dropped.
pub fn tile_grid(shape: (usize, usize), chip: usize) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = shape;
    if chip == 0 {
        return Err(Error::InvalidSpec("chip size must be positive".into()));
    }
    if rows < chip || cols < chip {
        return Err(Error::TooSmall(format!(
            "raster {rows}x{cols} cannot hold a {chip}x{chip} chip"
        )));
    }
    let mut out = Vec::with_capacity((rows / chip) * (cols / chip));
    for r in 0..rows / chip {
        for c in 0..cols / chip {
            out.push((r * chip, c * chip));
        }
    }
    Ok(out)
}

/// Cuts chips at `origins`. Mask nodata (255) becomes background.
pub fn extract_chips(
    stack: &[Grid<f32>],
    mask: &Grid<u8>,
    origins: &[(usize, usize)],
    size: usize,
) -> Result<Vec<Chip>> {
    let shape = mask.shape();
    if stack.iter().any(|g| g.shape() != shape) {
        return Err(Error::DimMismatch("input channels and mask differ in shape".into()));
    }
    origins
        .iter()
        .map(|&(r0, c0)| {
            if r0 + size > shape.0 || c0 + size > shape.1 {
                return Err(Error::OutOfBounds(format!("chip at ({r0}, {c0}) leaves the raster")));
            }
            let mut inputs = Vec::with_capacity(stack.len() * size * size);
            for g in stack {
                inputs.extend_from_slice(g.window(r0, c0, size, size).data());
            }
            let mask = mask
                .window(r0, c0, size, size)
                .into_data()
                .into_iter()
                .map(|m| (m == 1) as u8)
                .collect();
            Ok(Chip {
                origin: (r0, c0),
                size,
                channels: stack.len(),
                inputs,
                mask,
                split: None,
            })
        })
        .collect()
}

/// Keeps chips with at least one positive pixel, preserving order.
pub fn filter_positive(chips: Vec<Chip>) -> Vec<Chip> {
    chips.into_iter().filter(|c| c.positives() >= 1).collect()
}

/// Number of test items for `n` items at `test_fraction`: `ceil(n·f)`,
/// snapped when `n·f` is within rounding noise of an integer, and kept in
/// `1..n` so both sides are non-empty.
pub fn test_count(n: usize, test_fraction: f64) -> usize {
    let x = n as f64 * test_fraction;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).clamp(1, n - 1)
}

/// Seeded shuffle; the first `test_count(n, f)` shuffled positions go to test.
pub fn split_chips(n: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if n < 2 {
        return Err(Error::TooFew(format!("{n} chips cannot be split into train and test")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidSpec(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_count(n, test_fraction);
    let mut out = vec![Split::Train; n];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    Ok(out)
}

/// Train and test chips with standardised inputs, plus the statistics used.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub channels: Vec<Channel>,
    pub train: Vec<Chip>,
    pub test: Vec<Chip>,
    pub stats: ChannelStats,
    /// Chips before positive filtering.
    pub tiled: usize,
}

impl Dataset {
    /// Positive-pixel fraction over all retained chips.
    pub fn prevalence(&self) -> f64 {
        let (pos, tot) = self
            .train
            .iter()
            .chain(&self.test)
            .fold((0usize, 0usize), |(p, t), c| (p + c.positives(), t + c.pixels()));
        pos as f64 / tot.max(1) as f64
    }
}

/// Full chipping pipeline: raw channels → tiles → positive filter → split →
/// statistics over training pixels → standardisation of every chip.
pub fn prepare_dataset(
    cube: &Datacube,
    config: &InputConfig,
    chip_size: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let stack = raw_channels(cube, config)?;
    let mask = cube.read_grid_u8(vars::LABEL)?;
    let origins = tile_grid(mask.shape(), chip_size)?;
    let tiled = origins.len();
    let chips = filter_positive(extract_chips(&stack, &mask, &origins, chip_size)?);
    drop(stack);
    let assignment = split_chips(chips.len(), test_fraction, seed)?;
    let channels = config.channels();

    let mut acc = StatsAccumulator::new(channels.clone());
    for (chip, s) in chips.iter().zip(&assignment) {
        if *s == Split::Train {
            acc.push_flat(&chip.inputs);
        }
    }
    let stats = acc.finish()?;

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (mut chip, s) in chips.into_iter().zip(assignment) {
        stats.apply_flat(&mut chip.inputs)?;
        chip.split = Some(s);
        match s {
            Split::Train => train.push(chip),
            Split::Test => test.push(chip),
        }
    }
    Ok(Dataset {
        channels,
        train,
        test,
        stats,
        tiled,
    })
}

const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    chip: usize,
    y0: usize,
    x0: usize,
}

/// Writes chips as a Zarr group with `inputs (chip, channel, y, x)`,
/// `mask (chip, y, x)` and an `index.csv` of origins.
pub fn write_chip_set(dir: &Path, channels: &[Channel], chips: &[Chip]) -> Result<()> {
    let first = chips
        .first()
        .ok_or_else(|| Error::TooFew("no chips to write".into()))?;
    let (size, c) = (first.size, channels.len());
    if chips.iter().any(|ch| ch.size != size || ch.channels != c) {
        return Err(Error::DimMismatch("chips differ in size or channel count".into()));
    }
    let mut attrs = Map::new();
    attrs.insert("channels".into(), json!(channels.iter().map(|c| c.name()).collect::<Vec<_>>()));
    attrs.insert("chip_size".into(), json!(size));
    zarr::write_group(dir, &attrs)?;

    let n = chips.len();
    let inputs: Vec<f32> = chips.iter().flat_map(|ch| ch.inputs.iter().copied()).collect();
    zarr::write_array(
        &dir.join("inputs"),
        &ArrayMeta {
            shape: vec![n, c, size, size],
            chunks: vec![1, c, size, size],
            dtype: DType::F32,
            dim_names: ["chip", "channel", "y", "x"].map(String::from).to_vec(),
        },
        &ArrayData::F32(inputs),
    )?;
    let masks: Vec<u8> = chips.iter().flat_map(|ch| ch.mask.iter().copied()).collect();
    zarr::write_array(
        &dir.join("mask"),
        &ArrayMeta {
            shape: vec![n, size, size],
            chunks: vec![1, size, size],
            dtype: DType::U8,
            dim_names: ["chip", "y", "x"].map(String::from).to_vec(),
        },
        &ArrayData::U8(masks),
    )?;
    let index = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index)?;
    for (i, ch) in chips.iter().enumerate() {
        w.serialize(IndexRow {
            chip: i,
            y0: ch.origin.0,
            x0: ch.origin.1,
        })?;
    }
    w.flush().at(&index)?;
    Ok(())
}

/// Reads a directory written by [`write_chip_set`].
pub fn read_chip_set(dir: &Path) -> Result<(Vec<Channel>, Vec<Chip>)> {
    let attrs = zarr::read_group_attrs(dir)?;
    let names: Vec<String> = attrs
        .get("channels")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|v| v.as_str().map(String::from)).collect())
        .ok_or_else(|| Error::Corrupt(format!("{}: missing channels attribute", dir.display())))?;
    let channels = names
        .iter()
        .map(|n| {
            Channel::ORDER
                .into_iter()
                .find(|c| c.name() == n)
                .ok_or_else(|| Error::Corrupt(format!("unknown channel {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let imeta = zarr::read_array_meta(&dir.join("inputs"))?;
    let mmeta = zarr::read_array_meta(&dir.join("mask"))?;
    let (n, c, size) = match imeta.shape[..] {
        [n, c, h, w] if h == w && c == channels.len() => (n, c, h),
        _ => return Err(Error::Corrupt(format!("inputs shape {:?}", imeta.shape))),
    };
    if mmeta.shape != [n, size, size] {
        return Err(Error::Corrupt(format!("mask shape {:?}", mmeta.shape)));
    }
    let inputs = zarr::read_array(&dir.join("inputs"), &imeta, None)?
        .into_f32()
        .ok_or_else(|| Error::Corrupt("inputs not f32".into()))?;
    let masks = zarr::read_array(&dir.join("mask"), &mmeta, None)?
        .into_u8()
        .ok_or_else(|| Error::Corrupt("mask not u8".into()))?;

    let index = dir.join(INDEX_FILE);
    let mut origins = vec![(0, 0); n];
    for row in csv::Reader::from_path(&index)?.deserialize() {
        let row: IndexRow = row?;
        if row.chip >= n {
            return Err(Error::Corrupt(format!("index row for chip {} of {n}", row.chip)));
        }
        origins[row.chip] = (row.y0, row.x0);
    }
    let plane = size * size;
    let chips = (0..n)
        .map(|i| Chip {
            origin: origins[i],
            size,
            channels: c,
            inputs: inputs[i * c * plane..(i + 1) * c * plane].to_vec(),
            mask: masks[i * plane..(i + 1) * plane].to_vec(),
            split: None,
        })
        .collect();
    Ok((channels, chips))
}

/// Writes `train/`, `test/` and `stats.json` under `out`.
pub fn write_dataset(out: &Path, ds: &Dataset) -> Result<()> {
    if out.exists() && fs::read_dir(out).at(out)?.next().is_some() {
        return Err(Error::AlreadyExists(out.to_path_buf()));
    }
    fs::create_dir_all(out).at(out)?;
    write_chip_set(&out.join("train"), &ds.channels, &ds.train)?;
    write_chip_set(&out.join("test"), &ds.channels, &ds.test)?;
    ds.stats.save(&out.join("stats.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chip_with_mask(mask: Vec<u8>) -> Chip {
        Chip {
            origin: (0, 0),
            size: 2,
            channels: 1,
            inputs: vec![0.0; 4],
            mask,
            split: None,
        }
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_grid((256, 256), 128).unwrap().len(), 4);
        let t = tile_grid((300, 300), 128).unwrap();
        assert_eq!(t, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
        assert_eq!(tile_grid((4398, 5382), 128).unwrap().len(), 34 * 42);
        assert!(matches!(tile_grid((127, 500), 128), Err(Error::TooSmall(_))));
    }

    #[test]
    fn filter_rules() {
        let chips = vec![
            chip_with_mask(vec![0; 4]),
            chip_with_mask(vec![0, 0, 1, 0]),
            chip_with_mask(vec![1; 4]),
        ];
        let kept = filter_positive(chips);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].mask, vec![0, 0, 1, 0]);
        assert_eq!(filter_positive(kept.clone()), kept);
    }

    #[test]
    fn positives_in_one_quadrant_keep_one_chip() {
        let mask = Grid::from_fn(256, 256, |r, c| (r >= 140 && r < 150 && c >= 10 && c < 30) as u8);
        let stack = vec![Grid::filled(256, 256, 1.0f32)];
        let origins = tile_grid((256, 256), 128).unwrap();
        let kept = filter_positive(extract_chips(&stack, &mask, &origins, 128).unwrap());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].origin, (128, 0));
        assert_eq!(kept[0].positives(), 200);
    }

    #[test]
    fn nodata_becomes_background() {
        let mask = Grid::new(2, 2, vec![255, 1, 0, 255]);
        let chips = extract_chips(&[Grid::filled(2, 2, 0.0)], &mask, &[(0, 0)], 2).unwrap();
        assert_eq!(chips[0].mask, vec![0, 1, 0, 0]);
    }

    #[test]
    fn split_sizes() {
        let s = split_chips(277, 61.0 / 277.0, 0).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 61);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 216);
        let s = split_chips(2, 0.5, 3).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 1);
        assert!(matches!(split_chips(1, 0.5, 0), Err(Error::TooFew(_))));
        assert!(split_chips(10, 0.0, 0).is_err());
        assert!(split_chips(10, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let a = split_chips(100, 0.3, 42).unwrap();
        assert_eq!(a, split_chips(100, 0.3, 42).unwrap());
        assert_ne!(a, split_chips(100, 0.3, 43).unwrap());
    }

    #[test]
    fn chip_set_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let chips: Vec<Chip> = (0..3)
            .map(|i| Chip {
                origin: (i * 4, 8),
                size: 4,
                channels: 2,
                inputs: (0..32).map(|v| (v + i * 100) as f32).collect(),
                mask: (0..16).map(|v| ((v + i) % 3 == 0) as u8).collect(),
                split: None,
            })
            .collect();
        let ch = vec![Channel::VvPre, Channel::VvPost];
        write_chip_set(tmp.path(), &ch, &chips).unwrap();
        let (ch2, back) = read_chip_set(tmp.path()).unwrap();
        assert_eq!(ch2, ch);
        assert_eq!(back, chips);
    }
}
