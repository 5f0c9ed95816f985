//! Input-ablation grid: channel set × timestep count × seed, trained and
//! scored end to end, with crash-safe resume and CSV/PGM reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::chipper::{prepare_dataset, Chip, CHIP_SIZE};
use crate::cube_store::Datacube;
use crate::error::{Error, IoContext, Result};
use crate::metrics::evaluate_chips;
use crate::pgm;
use crate::preprocess::{ChannelSet, InputConfig};
use crate::segmodel::{predict_chips, train, ModelConfig, TrainConfig, UNet};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MAPS_DIR: &str = "maps";

/// 61 of 277 chips, the held-out share of the reference split.
pub const DEFAULT_TEST_FRACTION: f64 = 61.0 / 277.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub sets: Vec<ChannelSet>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub base_width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub chip_size: usize,
    pub test_fraction: f64,
    /// Per-cell training budget; exceeding it records `timeout`.
    pub time_limit_secs: Option<f64>,
    /// Cells trained concurrently.
    pub jobs: usize,
    /// Test chips per cell written as PGM maps.
    pub max_maps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            sets: ChannelSet::ALL.to_vec(),
            ks: vec![1, 2, 3, 4],
            seeds: (0..5).collect(),
            base_width: 16,
            depth: 4,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            weight_decay: t.weight_decay,
            chip_size: CHIP_SIZE,
            test_fraction: DEFAULT_TEST_FRACTION,
            time_limit_secs: None,
            jobs: 1,
            max_maps: 4,
        }
    }
}

impl AblationConfig {
    /// Cells in grid order: set, then k, then seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &set in &self.sets {
            for &k in &self.ks {
                for &seed in &self.seeds {
                    out.push(CellKey { set, k, seed });
                }
            }
        }
        out
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            seed,
            time_limit_secs: self.time_limit_secs,
        }
    }

    fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            base_width: self.base_width,
            depth: self.depth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub set: ChannelSet,
    pub k: usize,
    pub seed: u64,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_k{}_seed{}", self.set, self.k, self.seed)
    }
}

/// A cell's score, or why it has none.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Outcome {
    Auprc(f64),
    Timeout,
    Diverged,
}

impl Outcome {
    pub fn auprc(self) -> Option<f64> {
        match self {
            Outcome::Auprc(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Auprc(v) => write!(f, "{v}"),
            Outcome::Timeout => f.write_str("timeout"),
            Outcome::Diverged => f.write_str("diverged"),
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "timeout" => Ok(Outcome::Timeout),
            "diverged" => Ok(Outcome::Diverged),
            _ => s
                .parse::<f64>()
                .map(Outcome::Auprc)
                .map_err(|_| format!("invalid auprc field {s:?}")),
        }
    }
}

impl TryFrom<String> for Outcome {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Outcome> for String {
    fn from(o: Outcome) -> String {
        o.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub channel_set: ChannelSet,
    pub k: usize,
    pub seed: u64,
    pub auprc: Outcome,
    pub prevalence: f64,
    pub train_minutes: f64,
}

impl AblationRow {
    pub fn key(&self) -> CellKey {
        CellKey {
            set: self.channel_set,
            k: self.k,
            seed: self.seed,
        }
    }
}

/// Score and mask pairs kept for map output.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipMap {
    pub size: usize,
    pub scores: Vec<f32>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub maps: BTreeMap<CellKey, Vec<ChipMap>>,
}

impl AblationResult {
    pub fn row(&self, set: ChannelSet, k: usize, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.channel_set == set && r.k == k && r.seed == seed)
    }

    /// AUPRC values of completed cells for `(set, k)`, in seed order.
    pub fn scores(&self, set: ChannelSet, k: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.channel_set == set && r.k == k)
            .filter_map(|r| r.auprc.auprc())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub channel_set: ChannelSet,
    pub k: usize,
    pub runs: usize,
    pub mean_auprc: f64,
    pub std_auprc: f64,
}

/// Mean and sample standard deviation per `(set, k)` over completed seeds.
pub fn summarize(rows: &[AblationRow]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(ChannelSet, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = r.auprc.auprc() {
            groups.entry((r.channel_set, r.k)).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|((channel_set, k), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            CellSummary {
                channel_set,
                k,
                runs: v.len(),
                mean_auprc: mean,
                std_auprc: var.sqrt(),
            }
        })
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<AblationRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_results(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

fn append_row(path: &Path, row: &AblationRow) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).at(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush().at(path)
}

pub fn write_maps(dir: &Path, maps: &[ChipMap]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, m) in maps.iter().enumerate() {
        pgm::write_pgm16(
            &dir.join(format!("chip{i:03}_score.pgm")),
            m.size,
            m.size,
            &pgm::score_pixels(&m.scores),
        )?;
        pgm::write_pgm16(
            &dir.join(format!("chip{i:03}_mask.pgm")),
            m.size,
            m.size,
            &pgm::mask_pixels(&m.mask),
        )?;
    }
    Ok(())
}

/// Writes `results.csv`, `summary.csv` and every retained map under `out`.
pub fn emit_report(result: &AblationResult, out: &Path) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::TooFew("no ablation rows to report".into()));
    }
    fs::create_dir_all(out).at(out)?;
    write_results(&out.join(RESULTS_FILE), &result.rows)?;
    let summary = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary)?;
    for s in summarize(&result.rows) {
        w.serialize(s)?;
    }
    w.flush().at(&summary)?;
    for (key, maps) in &result.maps {
        write_maps(&out.join(MAPS_DIR).join(key.to_string()), maps)?;
    }
    Ok(())
}

fn test_prevalence(chips: &[Chip]) -> f64 {
    let (pos, tot) = chips
        .iter()
        .fold((0, 0), |(p, t), c| (p + c.positives(), t + c.pixels()));
    pos as f64 / tot.max(1) as f64
}

/// Trains and scores one cell.
pub fn run_cell(cube: &Datacube, cfg: &AblationConfig, key: CellKey) -> Result<(AblationRow, Vec<ChipMap>)> {
    let input = InputConfig::for_cube(cube, key.set, key.k)?;
    let ds = prepare_dataset(cube, &input, cfg.chip_size, cfg.test_fraction, key.seed)?;
    let mut model = UNet::<f32>::new(cfg.model_config(ds.channels.len()), key.seed)?;
    let started = std::time::Instant::now();
    let trained = train(&mut model, &ds.train, &cfg.train_config(key.seed), |_| {});
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let row = |auprc, prevalence| AblationRow {
        channel_set: key.set,
        k: key.k,
        seed: key.seed,
        auprc,
        prevalence,
        train_minutes: minutes,
    };
    match trained {
        Ok(_) => {}
        Err(Error::Timeout { .. }) => return Ok((row(Outcome::Timeout, test_prevalence(&ds.test)), Vec::new())),
        Err(Error::Diverged { .. }) => return Ok((row(Outcome::Diverged, test_prevalence(&ds.test)), Vec::new())),
        Err(e) => return Err(e),
    }
    let scores = predict_chips(&model, &ds.test, cfg.batch_size)?;
    let masks: Vec<&[u8]> = ds.test.iter().map(|c| c.mask.as_slice()).collect();
    let curve = evaluate_chips(&scores, &masks)?;
    let maps = ds
        .test
        .iter()
        .zip(scores)
        .take(cfg.max_maps)
        .map(|(c, s)| ChipMap {
            size: c.size,
            scores: s,
            mask: c.mask.clone(),
        })
        .collect();
    Ok((row(Outcome::Auprc(curve.auprc), curve.prevalence), maps))
}

/// Runs every cell not already recorded in `out/results.csv`, appending each
/// finished row immediately, then rewrites the report in grid order.
///
/// `DemOnly` cells do not depend on `k`, so one training per seed is shared
/// across all requested `k`.
pub fn run_ablation(
    cube: &Datacube,
    cfg: &AblationConfig,
    out: &Path,
    progress: &(dyn Fn(&AblationRow) + Sync),
) -> Result<AblationResult> {
    if cfg.sets.is_empty() || cfg.ks.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidSpec("ablation grid is empty".into()));
    }
    for &set in &cfg.sets {
        for &k in &cfg.ks {
            InputConfig::for_cube(cube, set, k)?;
        }
    }
    fs::create_dir_all(out).at(out)?;
    let results_path = out.join(RESULTS_FILE);
    let mut rows = if results_path.exists() {
        read_results(&results_path)?
    } else {
        Vec::new()
    };
    let done: HashSet<CellKey> = rows.iter().map(AblationRow::key).collect();

    // DemOnly cells for the same seed collapse onto one training run.
    let mut todo: Vec<CellKey> = Vec::new();
    let mut aliases: Vec<(CellKey, CellKey)> = Vec::new();
    for key in cfg.cells().into_iter().filter(|k| !done.contains(k)) {
        if key.set == ChannelSet::DemOnly {
            let existing = rows
                .iter()
                .map(AblationRow::key)
                .chain(todo.iter().copied())
                .find(|c| c.set == ChannelSet::DemOnly && c.seed == key.seed);
            if let Some(src) = existing {
                aliases.push((key, src));
                continue;
            }
        }
        todo.push(key);
    }

    let next = AtomicUsize::new(0);
    let shared = Mutex::new((Vec::<AblationRow>::new(), BTreeMap::new(), None::<Error>));
    let jobs = cfg.jobs.clamp(1, todo.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&key) = todo.get(i) else { break };
                if shared.lock().unwrap().2.is_some() {
                    break;
                }
                let outcome = run_cell(cube, cfg, key).and_then(|(row, maps)| {
                    write_maps(&out.join(MAPS_DIR).join(key.to_string()), &maps)?;
                    Ok((row, maps))
                });
                let mut guard = shared.lock().unwrap();
                match outcome {
                    Ok((row, maps)) => {
                        if let Err(e) = append_row(&results_path, &row) {
                            guard.2.get_or_insert(e);
                        }
                        progress(&row);
                        guard.0.push(row);
                        guard.1.insert(key, maps);
                    }
                    Err(e) => {
                        guard.2.get_or_insert(e);
                    }
                }
            });
        }
    });
    let (new_rows, mut maps, err) = shared.into_inner().unwrap();
    if let Some(e) = err {
        return Err(e);
    }
    rows.extend(new_rows);
    for (alias, src) in aliases {
        let mut row = rows
            .iter()
            .find(|r| r.key() == src)
            .cloned()
            .expect("aliased cell was computed");
        row.k = alias.k;
        append_row(&results_path, &row)?;
        progress(&row);
        rows.push(row);
        if let Some(m) = maps.get(&src).cloned() {
            maps.insert(alias, m);
        }
    }

    let order: BTreeMap<CellKey, usize> = cfg.cells().into_iter().enumerate().map(|(i, k)| (k, i)).collect();
    rows.sort_by_key(|r| (order.get(&r.key()).copied().unwrap_or(usize::MAX), r.key()));
    let result = AblationResult { rows, maps };
    emit_report(&result, out)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(set: ChannelSet, k: usize, seed: u64, auprc: Outcome) -> AblationRow {
        AblationRow {
            channel_set: set,
            k,
            seed,
            auprc,
            prevalence: 0.1,
            train_minutes: 0.5,
        }
    }

    #[test]
    fn grid_count() {
        let cfg = AblationConfig {
            sets: vec![ChannelSet::VvVh, ChannelSet::SarDem],
            ks: vec![1, 2, 3, 4],
            seeds: vec![0],
            ..AblationConfig::default()
        };
        assert_eq!(cfg.cells().len(), 8);
    }

    #[test]
    fn csv_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let rows: Vec<AblationRow> = (0..8)
            .map(|i| {
                let o = match i {
                    3 => Outcome::Timeout,
                    5 => Outcome::Diverged,
                    _ => Outcome::Auprc(0.1 + i as f64 / 9.0),
                };
                row(ChannelSet::ALL[i % 5], 1 + i % 4, i as u64, o)
            })
            .collect();
        let p = tmp.path().join("r.csv");
        write_results(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert_eq!(text.lines().next().unwrap(), "channel_set,k,seed,auprc,prevalence,train_minutes");
        assert!(text.contains(",timeout,"));
        assert_eq!(read_results(&p).unwrap(), rows);
    }

    #[test]
    fn appended_rows_parse() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("r.csv");
        let a = row(ChannelSet::VvOnly, 1, 0, Outcome::Auprc(0.5));
        let b = row(ChannelSet::DemOnly, 2, 1, Outcome::Timeout);
        append_row(&p, &a).unwrap();
        append_row(&p, &b).unwrap();
        assert_eq!(read_results(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn summary_stats() {
        let rows = vec![
            row(ChannelSet::VvVh, 1, 0, Outcome::Auprc(0.4)),
            row(ChannelSet::VvVh, 1, 1, Outcome::Auprc(0.6)),
            row(ChannelSet::VvVh, 1, 2, Outcome::Timeout),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 2);
        assert!((s[0].mean_auprc - 0.5).abs() < 1e-12);
        assert!((s[0].std_auprc - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_writes_maps() {
        let tmp = tempfile::tempdir().unwrap();
        let key = CellKey {
            set: ChannelSet::VvVh,
            k: 1,
            seed: 0,
        };
        let mut result = AblationResult {
            rows: vec![row(key.set, key.k, key.seed, Outcome::Auprc(0.7))],
            ..AblationResult::default()
        };
        result.maps.insert(
            key,
            vec![ChipMap {
                size: 4,
                scores: vec![0.5; 16],
                mask: vec![0; 16],
            }],
        );
        emit_report(&result, tmp.path()).unwrap();
        let dir = tmp.path().join(MAPS_DIR).join("vvvh_k1_seed0");
        let (_, _, px) = pgm::read_pgm16(&dir.join("chip000_mask.pgm")).unwrap();
        assert!(px.iter().all(|&v| v == 0));
        let (_, _, px) = pgm::read_pgm16(&dir.join("chip000_score.pgm")).unwrap();
        assert!(px.iter().all(|&v| v == 32768));
        assert!(emit_report(&AblationResult::default(), tmp.path()).is_err());
    }
}
