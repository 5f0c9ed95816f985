//! Model input channels: log-stabilised, temporally averaged SAR backscatter
//! plus terrain layers, standardised with training-set statistics.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cube_store::{attrs, vars, Datacube, Dim};
use crate::error::{Error, IoContext, Result};
use crate::raster::Grid;

/// Linear-power floor applied before the natural log.
pub const LOG_FLOOR: f32 = 1e-6;
/// Lower bound on per-channel standard deviation.
pub const STD_EPS: f64 = 1e-6;
/// Largest number of passes averaged on either side of the event.
pub const MAX_TIMESTEPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    VvPre,
    VhPre,
    VvPost,
    VhPost,
    Elevation,
    Aspect,
    Slope,
    Curvature,
}

impl Channel {
    /// Canonical stacking order.
    pub const ORDER: [Channel; 8] = [
        Channel::VvPre,
        Channel::VhPre,
        Channel::VvPost,
        Channel::VhPost,
        Channel::Elevation,
        Channel::Aspect,
        Channel::Slope,
        Channel::Curvature,
    ];

    pub fn is_sar(self) -> bool {
        matches!(self, Channel::VvPre | Channel::VhPre | Channel::VvPost | Channel::VhPost)
    }

    /// Cube variable the channel is built from.
    pub fn source_var(self) -> &'static str {
        match self {
            Channel::VvPre | Channel::VvPost => vars::VV,
            Channel::VhPre | Channel::VhPost => vars::VH,
            Channel::Elevation => vars::DEM,
            Channel::Aspect => vars::ASPECT,
            Channel::Slope => vars::SLOPE,
            Channel::Curvature => vars::CURVATURE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::VvPre => "vv_pre",
            Channel::VhPre => "vh_pre",
            Channel::VvPost => "vv_post",
            Channel::VhPost => "vh_post",
            Channel::Elevation => "elevation",
            Channel::Aspect => "aspect",
            Channel::Slope => "slope",
            Channel::Curvature => "curvature",
        }
    }
}

/// The input configurations of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelSet {
    #[serde(rename = "vv")]
    VvOnly,
    #[serde(rename = "vh")]
    VhOnly,
    #[serde(rename = "vvvh")]
    VvVh,
    #[serde(rename = "sardem")]
    SarDem,
    #[serde(rename = "dem")]
    DemOnly,
}

impl ChannelSet {
    pub const ALL: [ChannelSet; 5] = [
        ChannelSet::VvOnly,
        ChannelSet::VhOnly,
        ChannelSet::VvVh,
        ChannelSet::SarDem,
        ChannelSet::DemOnly,
    ];

    pub fn channels(self) -> Vec<Channel> {
        Channel::ORDER
            .into_iter()
            .filter(|c| match self {
                ChannelSet::VvOnly => matches!(c, Channel::VvPre | Channel::VvPost),
                ChannelSet::VhOnly => matches!(c, Channel::VhPre | Channel::VhPost),
                ChannelSet::VvVh => c.is_sar(),
                ChannelSet::SarDem => true,
                ChannelSet::DemOnly => !c.is_sar(),
            })
            .collect()
    }

    pub fn channel_count(self) -> usize {
        self.channels().len()
    }

    pub fn uses_sar(self) -> bool {
        self != ChannelSet::DemOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelSet::VvOnly => "vv",
            ChannelSet::VhOnly => "vh",
            ChannelSet::VvVh => "vvvh",
            ChannelSet::SarDem => "sardem",
            ChannelSet::DemOnly => "dem",
        }
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelSet::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidSpec(format!("unknown channel set {s:?}")))
    }
}

/// Which channels to build and which timesteps feed the pre/post means.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputConfig {
    pub channel_set: ChannelSet,
    pub k_timesteps: usize,
    pub pre_indices: Vec<usize>,
    pub post_indices: Vec<usize>,
}

impl InputConfig {
    /// The `k` passes immediately before `event_index` and the `k` starting
    /// at it (`event_index` is the first post-event timestep).
    pub fn around_event(channel_set: ChannelSet, k: usize, event_index: usize, n_timesteps: usize) -> Result<Self> {
        if k == 0 || k > MAX_TIMESTEPS {
            return Err(Error::InvalidSpec(format!("k = {k} outside 1..={MAX_TIMESTEPS}")));
        }
        if event_index < k || event_index + k > n_timesteps {
            return Err(Error::InvalidSpec(format!(
                "need {k} timesteps either side of event index {event_index} in {n_timesteps}"
            )));
        }
        let cfg = Self {
            channel_set,
            k_timesteps: k,
            pre_indices: (event_index - k..event_index).collect(),
            post_indices: (event_index..event_index + k).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same as [`around_event`](Self::around_event), reading the event index
    /// and timestep count from the cube.
    pub fn for_cube(cube: &Datacube, channel_set: ChannelSet, k: usize) -> Result<Self> {
        let event = event_index(cube)?;
        let n = cube.dim_len(Dim::Timestep).unwrap_or(0);
        if !channel_set.uses_sar() {
            // terrain-only inputs never touch the time axis
            return Ok(Self {
                channel_set,
                k_timesteps: k,
                pre_indices: Vec::new(),
                post_indices: Vec::new(),
            });
        }
        Self::around_event(channel_set, k, event, n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_timesteps == 0 || self.k_timesteps > MAX_TIMESTEPS {
            return Err(Error::InvalidSpec(format!(
                "k = {} outside 1..={MAX_TIMESTEPS}",
                self.k_timesteps
            )));
        }
        if self.channel_set.uses_sar()
            && (self.pre_indices.len() != self.k_timesteps || self.post_indices.len() != self.k_timesteps)
        {
            return Err(Error::InvalidSpec(format!(
                "k = {} but {} pre and {} post indices",
                self.k_timesteps,
                self.pre_indices.len(),
                self.post_indices.len()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.channel_set.channels()
    }
}

/// Reads the `event_index` cube attribute.
pub fn event_index(cube: &Datacube) -> Result<usize> {
    cube.attr(attrs::EVENT_INDEX)
        .ok_or_else(|| Error::NotFound(format!("cube attribute {:?}", attrs::EVENT_INDEX)))?
        .trim()
        .parse()
        .map_err(|e| Error::InvalidSpec(format!("{}: {e}", attrs::EVENT_INDEX)))
}

/// `ln(max(x, 1e-6))`, elementwise.
pub fn log_stabilize(x: &Grid<f32>) -> Grid<f32> {
    x.map(|v| {
        // NaN falls through max() to the floor as well
        let v = if v > LOG_FLOOR { v } else { LOG_FLOOR };
        v.ln()
    })
}

/// Per-pixel arithmetic mean across the stack.
pub fn temporal_mean(stack: &[Grid<f32>]) -> Result<Grid<f32>> {
    let first = stack
        .first()
        .ok_or_else(|| Error::InvalidSpec("temporal mean of an empty stack".into()))?;
    if stack.iter().any(|g| g.shape() != first.shape()) {
        return Err(Error::DimMismatch("stack layers differ in shape".into()));
    }
    let n = stack.len() as f64;
    let (rows, cols) = first.shape();
    let mut acc = vec![0.0f64; rows * cols];
    for g in stack {
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a += v as f64;
        }
    }
    Ok(Grid::new(rows, cols, acc.into_iter().map(|s| (s / n) as f32).collect()))
}

/// `(x − mean) / std`.
pub fn standardize(x: &Grid<f32>, mean: f64, std: f64) -> Grid<f32> {
    let inv = 1.0 / std.max(STD_EPS);
    x.map(|v| ((v as f64 - mean) * inv) as f32)
}

/// Per-channel standardisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: Vec<Channel>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn identity(channels: Vec<Channel>) -> Self {
        let n = channels.len();
        Self {
            channels,
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.channels.len() || self.std.len() != self.channels.len() {
            return Err(Error::InvalidSpec("channel stats lengths disagree".into()));
        }
        if self.std.iter().any(|&s| !(s >= STD_EPS && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidSpec("channel stats must be finite with std >= 1e-6".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).at(path)?;
        fs::write(path, text).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let s: Self = serde_json::from_slice(&bytes).at(path)?;
        s.validate()?;
        Ok(s)
    }

    /// Standardises each grid of a `(C, y, x)` stack in place.
    pub fn apply(&self, stack: &mut [Grid<f32>]) -> Result<()> {
        if stack.len() != self.len() {
            return Err(Error::DimMismatch(format!(
                "{} channels but stats for {}",
                stack.len(),
                self.len()
            )));
        }
        for (g, (&m, &s)) in stack.iter_mut().zip(self.mean.iter().zip(&self.std)) {
            *g = standardize(g, m, s);
        }
        Ok(())
    }

    /// Standardises a flat `(C, H, W)` buffer in place.
    pub fn apply_flat(&self, data: &mut [f32]) -> Result<()> {
        if self.is_empty() || data.len() % self.len() != 0 {
            return Err(Error::DimMismatch("buffer not divisible into channels".into()));
        }
        let plane = data.len() / self.len();
        for (c, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let (m, inv) = (self.mean[c], 1.0 / self.std[c].max(STD_EPS));
            for v in chunk {
                *v = ((*v as f64 - m) * inv) as f32;
            }
        }
        Ok(())
    }
}

/// Streaming mean/variance per channel (Chan et al. pairwise merge).
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    channels: Vec<Channel>,
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: Vec<Channel>) -> Self {
        let n = channels.len();
        Self {
            channels,
            count: vec![0.0; n],
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    pub fn push(&mut self, channel: usize, values: &[f32]) {
        if values.is_empty() {
            return;
        }
        let nb = values.len() as f64;
        let mb = values.iter().map(|&v| v as f64).sum::<f64>() / nb;
        let m2b: f64 = values.iter().map(|&v| (v as f64 - mb).powi(2)).sum();
        let na = self.count[channel];
        let delta = mb - self.mean[channel];
        let n = na + nb;
        self.mean[channel] += delta * nb / n;
        self.m2[channel] += m2b + delta * delta * na * nb / n;
        self.count[channel] = n;
    }

    /// Pushes a flat `(C, H, W)` buffer.
    pub fn push_flat(&mut self, data: &[f32]) {
        let plane = data.len() / self.channels.len();
        for (c, chunk) in data.chunks_exact(plane).enumerate() {
            self.push(c, chunk);
        }
    }

    pub fn finish(self) -> Result<ChannelStats> {
        if self.count.iter().any(|&n| n == 0.0) {
            return Err(Error::TooFew("no pixels to compute channel statistics".into()));
        }
        let std = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, n)| (m2 / n).sqrt().max(STD_EPS))
            .collect();
        Ok(ChannelStats {
            channels: self.channels,
            mean: self.mean,
            std,
        })
    }
}

fn mean_log_backscatter(cube: &Datacube, var: &str, indices: &[usize]) -> Result<Grid<f32>> {
    let n = cube
        .dim_len(Dim::Timestep)
        .ok_or_else(|| Error::NotFound("cube has no timestep dimension".into()))?;
    let mut stack = Vec::with_capacity(indices.len());
    for &t in indices {
        if t >= n {
            return Err(Error::OutOfBounds(format!("timestep {t} of {n}")));
        }
        stack.push(log_stabilize(&cube.read_grid_f32(var, Some(t))?));
    }
    temporal_mean(&stack)
}

/// Builds the unstandardised `(C, y, x)` stack: SAR channels are the mean of
/// log-stabilised passes, terrain channels are read as stored.
pub fn raw_channels(cube: &Datacube, config: &InputConfig) -> Result<Vec<Grid<f32>>> {
    config.validate()?;
    config
        .channels()
        .into_iter()
        .map(|ch| match ch {
            Channel::VvPre | Channel::VhPre => mean_log_backscatter(cube, ch.source_var(), &config.pre_indices),
            Channel::VvPost | Channel::VhPost => {
                mean_log_backscatter(cube, ch.source_var(), &config.post_indices)
            }
            _ => cube.read_grid_f32(ch.source_var(), None),
        })
        .collect()
}

/// Standardised model input stack for the whole cube.
pub fn assemble_inputs(cube: &Datacube, config: &InputConfig, stats: &ChannelStats) -> Result<Vec<Grid<f32>>> {
    if stats.channels != config.channels() {
        return Err(Error::DimMismatch(format!(
            "stats cover {:?}, config needs {:?}",
            stats.channels,
            config.channels()
        )));
    }
    let mut stack = raw_channels(cube, config)?;
    stats.apply(&mut stack)?;
    Ok(stack)
}
