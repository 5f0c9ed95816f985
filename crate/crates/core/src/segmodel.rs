//! U-Net style encoder–decoder, its training loop, inference and checkpoints.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"SLDCKPT\0"
//! 8       4     u32 format version (currently 1)
//! 12      4     u32 header length H
//! 16      H     UTF-8 JSON header (see `CheckpointHeader`)
//! 16+H    ...   f32 parameter data, tensors in header order
//!         ...   if header.optimizer is present: f32 first moments, then f32
//!               second moments, both in parameter order
//! ```
//!
//! The header records the model and input configuration, the channel
//! statistics needed to standardise new inputs, parameter names and shapes,
//! and optimiser/schedule state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slidecube_nn::{
    Adam, AdamConfig, Conv2dSpec, Graph, PlateauConfig, PlateauSchedule, Scalar, Tensor, Var,
};

use crate::chipper::Chip;
use crate::error::{Error, IoContext, Result};
use crate::preprocess::ChannelStats;

pub const OUT_CLASSES: usize = 2;
const NORM_GROUPS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_width() -> usize {
    16
}

fn default_depth() -> usize {
    4
}

const MAX_CHANNELS: usize = 1 << 12;

impl ModelConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_width: default_width(),
            depth: default_depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidSpec("in_channels and base_width must be positive".into()));
        }
        // far beyond anything trainable here; keeps size arithmetic in range
        if self.in_channels > MAX_CHANNELS || self.base_width > MAX_CHANNELS {
            return Err(Error::InvalidSpec(format!(
                "in_channels and base_width must be at most {MAX_CHANNELS}"
            )));
        }
        if self.depth == 0 || 128 % (1usize << self.depth.min(31)) != 0 {
            return Err(Error::InvalidSpec(format!(
                "depth {} must be >= 1 with 128 divisible by 2^depth",
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(in, out, kernel)` of every convolution in parameter order.
    fn conv_layout(&self) -> Vec<(usize, usize, usize)> {
        let mut convs = Vec::new();
        let mut cin = self.in_channels;
        for i in 0..self.depth {
            let w = self.width(i);
            convs.push((cin, w, 3));
            convs.push((w, w, 3));
            cin = w;
        }
        let wb = self.width(self.depth);
        convs.push((cin, wb, 3));
        convs.push((wb, wb, 3));
        let mut cprev = wb;
        for i in (0..self.depth).rev() {
            let w = self.width(i);
            convs.push((cprev + w, w, 3));
            convs.push((w, w, 3));
            cprev = w;
        }
        convs.push((cprev, OUT_CLASSES, 1));
        convs
    }

    /// Trainable scalars: every conv has weights and bias; every conv but
    /// the classifier is followed by a normalisation with per-channel
    /// scale and shift.
    pub fn param_count(&self) -> usize {
        let layout = self.conv_layout();
        let last = layout.len() - 1;
        layout
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k))| co * ci * k * k + co + if i < last { 2 * co } else { 0 })
            .sum()
    }
}

/// Missing fields in serialized form take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Abort with [`Error::Timeout`] once training exceeds this many seconds.
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr0: 0.01,
            weight_decay: 1e-4,
            seed: 0,
            time_limit_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidSpec("lr0 and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

struct ConvIdx {
    w: usize,
    b: usize,
    norm: Option<(usize, usize)>,
}

/// Encoder–decoder with skip connections; parameters are kept as a flat list.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

fn layer_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..cfg.depth {
        names.push(format!("enc{i}.conv1"));
        names.push(format!("enc{i}.conv2"));
    }
    names.push("bottleneck.conv1".into());
    names.push("bottleneck.conv2".into());
    for i in (0..cfg.depth).rev() {
        names.push(format!("dec{i}.conv1"));
        names.push(format!("dec{i}.conv2"));
    }
    names.push("head".into());
    names
}

impl<T: Scalar> UNet<T> {
    /// Kaiming-uniform convolution weights (bound `√(6 / fan_in)`), zero
    /// biases, unit/zero normalisation affine, and a zero classifier so the
    /// untrained model outputs equal logits.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.conv_layout();
        let last = layout.len() - 1;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (i, (&(ci, co, k), layer)) in layout.iter().zip(layer_names(&config)).enumerate() {
            let fan_in = (ci * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = if i == last {
                Tensor::zeros(&[co, ci, k, k])
            } else {
                Tensor::from_fn(&[co, ci, k, k], |_| {
                    T::from_f64_lossy(rng.random_range(-bound..bound))
                })
            };
            names.push(format!("{layer}.weight"));
            params.push(w);
            names.push(format!("{layer}.bias"));
            params.push(Tensor::zeros(&[co]));
            if i < last {
                names.push(format!("{layer}.norm_scale"));
                params.push(Tensor::full(&[co], T::one()));
                names.push(format!("{layer}.norm_shift"));
                params.push(Tensor::zeros(&[co]));
            }
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn conv_indices(&self) -> Vec<ConvIdx> {
        let n_convs = self.config.conv_layout().len();
        let mut out = Vec::with_capacity(n_convs);
        let mut p = 0;
        for i in 0..n_convs {
            if i + 1 < n_convs {
                out.push(ConvIdx {
                    w: p,
                    b: p + 1,
                    norm: Some((p + 2, p + 3)),
                });
                p += 4;
            } else {
                out.push(ConvIdx { w: p, b: p + 1, norm: None });
            }
        }
        out
    }

    /// Records the forward pass on `g`. Returns logits `(N, 2, H, W)` and the
    /// graph variables of every parameter, in parameter order.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect();
        let logits = self.forward_with(g, x, &vars)?;
        Ok((logits, vars))
    }

    /// Forward pass using caller-supplied parameter variables, which must
    /// match [`UNet::params`] in order and shape.
    pub fn forward_with(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::DimMismatch(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let shape = g.value(x).shape().to_vec();
        let mult = 1usize << self.config.depth;
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::DimMismatch(format!(
                "model expects (N, {}, H, W) input, got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2] % mult != 0 || shape[3] % mult != 0 {
            return Err(Error::DimMismatch(format!(
                "spatial size {}x{} not divisible by {mult}",
                shape[2], shape[3]
            )));
        }
        let convs = self.conv_indices();
        let mut next = convs.iter();
        let mut block = |g: &mut Graph<T>, h: Var| -> Result<Var> {
            let c = next.next().expect("conv layout matches parameters");
            let spec = if c.norm.is_some() { Conv2dSpec::SAME3 } else { Conv2dSpec::POINTWISE };
            let y = g.conv2d(h, vars[c.w], Some(vars[c.b]), spec)?;
            Ok(match c.norm {
                Some((s, t)) => {
                    let y = g.group_norm(y, vars[s], vars[t], NORM_GROUPS)?;
                    g.relu(y)
                }
                None => y,
            })
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            h = block(g, h)?;
            h = block(g, h)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = block(g, h)?;
        h = block(g, h)?;
        for skip in skips.into_iter().rev() {
            h = g.upsample2(h)?;
            h = g.concat_channels(h, skip)?;
            h = block(g, h)?;
            h = block(g, h)?;
        }
        block(g, h)
    }
}

/// Stacks chips into an `(N, C, H, W)` tensor and the flat label vector.
pub fn batch_tensors<T: Scalar>(chips: &[&Chip]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = chips
        .first()
        .ok_or_else(|| Error::TooFew("empty batch".into()))?;
    let (c, s) = (first.channels, first.size);
    if chips.iter().any(|ch| ch.channels != c || ch.size != s) {
        return Err(Error::DimMismatch("chips in a batch differ in shape".into()));
    }
    let mut data = Vec::with_capacity(chips.len() * c * s * s);
    let mut labels = Vec::with_capacity(chips.len() * s * s);
    for ch in chips {
        data.extend(ch.inputs.iter().map(|&v| T::from_f64_lossy(v as f64)));
        labels.extend_from_slice(&ch.mask);
    }
    Ok((Tensor::new(vec![chips.len(), c, s, s], data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Mutable training state that survives between epochs and into checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: Adam<f32>,
    pub schedule: PlateauSchedule,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(AdamConfig {
                lr: cfg.lr0,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            }),
            schedule: PlateauSchedule::new(cfg.lr0, PlateauConfig::default()),
            epochs_done: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub state: TrainState,
    pub seconds: f64,
}

fn one_step<T: Scalar>(
    model: &UNet<T>,
    batch: &[&Chip],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (x, labels) = batch_tensors::<T>(batch)?;
    let mut g = Graph::new();
    let xv = g.leaf(x, false);
    let (logits, vars) = model.forward(&mut g, xv, true)?;
    let loss = g.cross_entropy(logits, &labels)?;
    let value = g.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Trains in place. Chips are reshuffled each epoch from a seeded stream;
/// the plateau schedule watches the mean training loss.
///
/// A non-finite loss restores the parameters from the start of the failing
/// epoch and returns [`Error::Diverged`]. Exceeding the time limit returns
/// [`Error::Timeout`].
pub fn train(
    model: &mut UNet<f32>,
    chips: &[Chip],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if chips.is_empty() {
        return Err(Error::TooFew("no training chips".into()));
    }
    let mut state = TrainState::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..chips.len()).collect();

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let last_good = model.params.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            if let Some(limit) = cfg.time_limit_secs {
                if start.elapsed().as_secs_f64() > limit {
                    return Err(Error::Timeout {
                        epoch,
                        limit_secs: limit,
                    });
                }
            }
            let batch: Vec<&Chip> = idx.iter().map(|&i| &chips[i]).collect();
            let (loss, grads) = one_step(model, &batch)?;
            if !loss.is_finite() {
                model.params = last_good;
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            state.adam.step(&mut model.params, &grads)?;
        }
        let loss = loss_sum / chips.len() as f64;
        let lr_used = state.schedule.lr();
        let lr_next = state.schedule.step(loss);
        state.adam.set_lr(lr_next);
        state.epochs_done = epoch;
        let entry = EpochLog {
            epoch,
            loss,
            lr: lr_used,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainReport {
        log,
        state,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Landslide-class softmax probability for each pixel of each chip.
pub fn predict_chips<T: Scalar>(model: &UNet<T>, chips: &[Chip], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(chips.len());
    for group in chips.chunks(batch_size.max(1)) {
        let batch: Vec<&Chip> = group.iter().collect();
        let (x, _) = batch_tensors::<T>(&batch)?;
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let (logits, _) = model.forward(&mut g, xv, false)?;
        let l = g.value(logits).data();
        let plane = group[0].size * group[0].size;
        for n in 0..group.len() {
            let base = n * OUT_CLASSES * plane;
            out.push(
                (0..plane)
                    .map(|i| {
                        let d = (l[base + i] - l[base + plane + i]).to_f64_lossy();
                        (1.0 / (1.0 + d.exp())) as f32
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Scores a single `(C, S, S)` input.
pub fn predict<T: Scalar>(model: &UNet<T>, inputs: &[f32], size: usize) -> Result<Vec<f32>> {
    let c = model.config().in_channels;
    if inputs.len() != c * size * size {
        return Err(Error::DimMismatch(format!(
            "{} input values for {c} channels of {size}x{size}",
            inputs.len()
        )));
    }
    let chip = Chip {
        origin: (0, 0),
        size,
        channels: c,
        inputs: inputs.to_vec(),
        mask: vec![0; size * size],
        split: None,
    };
    Ok(predict_chips(model, std::slice::from_ref(&chip), 1)?.remove(0))
}

const MAGIC: &[u8; 8] = b"SLDCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    adam_step: u64,
    lr: f64,
    best_loss: Option<f64>,
    bad_epochs: u32,
    epochs_seen: u64,
    epochs_done: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    stats: ChannelStats,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// Everything needed to resume or to score new inputs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub stats: ChannelStats,
    pub state: Option<TrainState>,
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let opt = self.state.as_ref().filter(|s| !s.adam.moments().0.is_empty());
        let header = CheckpointHeader {
            model: self.model.config,
            stats: self.stats.clone(),
            params: self
                .model
                .names
                .iter()
                .zip(&self.model.params)
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
            optimizer: opt.map(|s| OptimizerHeader {
                adam_step: s.adam.step_count(),
                lr: s.schedule.lr(),
                best_loss: s.schedule.best().is_finite().then(|| s.schedule.best()),
                bad_epochs: s.schedule.bad_epochs(),
                epochs_seen: s.schedule.epochs_seen(),
                epochs_done: s.epochs_done,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.model.params {
            put_f32s(&mut buf, p.data());
        }
        if let Some(s) = opt {
            let (m, v) = s.adam.moments();
            for t in m.iter().chain(v) {
                put_f32s(&mut buf, t);
            }
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp).and_then(|mut f| f.write_all(&buf)).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).at(path)?;
        let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        header.stats.validate()?;
        let mut model = UNet::<f32>::new(header.model, 0)?;
        if model.names.len() != header.params.len()
            || model
                .names
                .iter()
                .zip(model.params.iter())
                .zip(&header.params)
                .any(|((n, p), e)| *n != e.name || p.shape() != e.shape.as_slice())
        {
            return Err(corrupt("parameter table does not match the model configuration"));
        }

        let mut floats = bytes[16 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = floats.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(corrupt("truncated tensor data"))
            }
        };
        for p in model.params.iter_mut() {
            let data = take(p.numel())?;
            p.data_mut().copy_from_slice(&data);
        }
        let state = match header.optimizer {
            None => None,
            Some(o) => {
                let sizes: Vec<usize> = model.params.iter().map(Tensor::numel).collect();
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let adam = Adam::from_state(
                    AdamConfig {
                        lr: o.lr,
                        ..AdamConfig::default()
                    },
                    o.adam_step,
                    m,
                    v,
                );
                let schedule = PlateauSchedule::restore(
                    PlateauConfig::default(),
                    o.lr,
                    o.best_loss.unwrap_or(f64::INFINITY),
                    o.bad_epochs,
                    o.epochs_seen,
                );
                Some(TrainState {
                    adam,
                    schedule,
                    epochs_done: o.epochs_done,
                })
            }
        };
        if floats.next().is_some() {
            return Err(corrupt("trailing data"));
        }
        Ok(Self {
            model,
            stats: header.stats,
            state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Channel;

    fn chip(c: usize, s: usize, seed: u64) -> Chip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<u8> = (0..s * s).map(|i| ((i / s) < s / 2 && (i % s) < s / 2) as u8).collect();
        let inputs = (0..c * s * s)
            .map(|i| {
                let m = mask[i % (s * s)] as f32;
                m * 1.5 + rng.random_range(-0.5..0.5)
            })
            .collect();
        Chip {
            origin: (0, 0),
            size: s,
            channels: c,
            inputs,
            mask,
            split: None,
        }
    }

    #[test]
    fn output_shape_and_untrained_scores() {
        let cfg = ModelConfig::new(8);
        let model = UNet::<f32>::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 8, 128, 128]), false);
        let (logits, _) = model.forward(&mut g, x, false).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 2, 128, 128]);
        let s = predict(&model, &chip(8, 128, 1).inputs, 128).unwrap();
        assert!(s.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn closed_form_param_count() {
        let cfg = ModelConfig {
            in_channels: 4,
            base_width: 16,
            depth: 4,
        };
        let model = UNet::<f32>::new(cfg, 0).unwrap();
        // conv(ci→co, 3×3) with bias and norm affine: 9·ci·co + 3·co
        let c = |ci: usize, co: usize| 9 * ci * co + 3 * co;
        let expected = c(4, 16) + c(16, 16)
            + c(16, 32) + c(32, 32)
            + c(32, 64) + c(64, 64)
            + c(64, 128) + c(128, 128)
            + c(128, 256) + c(256, 256)
            + c(256 + 128, 128) + c(128, 128)
            + c(128 + 64, 64) + c(64, 64)
            + c(64 + 32, 32) + c(32, 32)
            + c(32 + 16, 16) + c(16, 16)
            + (16 * 2 + 2);
        assert_eq!(model.param_count(), expected);
        assert_eq!(cfg.param_count(), expected);
    }

    #[test]
    fn invalid_configs() {
        for (c, w, d) in [(0, 16, 4), (4, 0, 4), (4, 16, 0), (4, 16, 8)] {
            let cfg = ModelConfig {
                in_channels: c,
                base_width: w,
                depth: d,
            };
            assert!(matches!(UNet::<f32>::new(cfg, 0), Err(Error::InvalidSpec(_))));
        }
        let model = UNet::<f32>::new(ModelConfig::new(4), 0).unwrap();
        assert!(matches!(predict(&model, &[0.0; 3 * 16 * 16], 16), Err(Error::DimMismatch(_))));
        assert!(predict(&model, &[0.0; 4 * 24 * 24], 24).is_err());
    }

    #[test]
    fn depth_one_smoke() {
        let cfg = ModelConfig {
            in_channels: 2,
            base_width: 4,
            depth: 1,
        };
        let mut model = UNet::<f32>::new(cfg, 3).unwrap();
        let chips = vec![chip(2, 16, 0)];
        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &chips, &tcfg, |_| {}).unwrap();
        assert!(r.log[0].loss.is_finite());
        assert!((r.log[0].loss - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn single_chip_overfits() {
        let cfg = ModelConfig {
            in_channels: 2,
            base_width: 8,
            depth: 2,
        };
        let mut model = UNet::<f32>::new(cfg, 1).unwrap();
        let chips = vec![chip(2, 32, 5)];
        let tcfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &chips, &tcfg, |_| {}).unwrap();
        let (first, last) = (r.log[0].loss, r.log.last().unwrap().loss);
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
        let s = predict_chips(&model, &chips, 1).unwrap().remove(0);
        let mean = |want: u8| {
            let v: Vec<f32> = s.iter().zip(&chips[0].mask).filter(|(_, &m)| m == want).map(|(p, _)| *p).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(1) > mean(0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig {
            in_channels: 1,
            base_width: 4,
            depth: 2,
        };
        let chips: Vec<Chip> = (0..3).map(|i| chip(1, 16, i)).collect();
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = UNet::<f32>::new(cfg, 9).unwrap();
            let r = train(&mut m, &chips, &tcfg, |_| {}).unwrap();
            (r.log.last().unwrap().loss.to_bits(), m.params().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn timeout_is_reported() {
        let mut model = UNet::<f32>::new(ModelConfig { in_channels: 1, base_width: 4, depth: 1 }, 0).unwrap();
        let tcfg = TrainConfig {
            epochs: 5,
            time_limit_secs: Some(0.0),
            ..TrainConfig::default()
        };
        std::thread::sleep(std::time::Duration::from_millis(2));
        let r = train(&mut model, &[chip(1, 8, 0)], &tcfg, |_| {});
        assert!(matches!(r, Err(Error::Timeout { epoch: 1, .. })));
    }

    #[test]
    fn divergence_restores_parameters() {
        let mut model = UNet::<f32>::new(ModelConfig { in_channels: 1, base_width: 4, depth: 1 }, 0).unwrap();
        let before = model.params().to_vec();
        let mut bad = chip(1, 8, 0);
        bad.inputs[3] = f32::NAN;
        let r = train(&mut model, &[bad], &TrainConfig::default(), |_| {});
        assert!(matches!(r, Err(Error::Diverged { epoch: 1, .. })), "{r:?}");
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            in_channels: 2,
            base_width: 4,
            depth: 2,
        };
        let mut model = UNet::<f32>::new(cfg, 2).unwrap();
        let chips = vec![chip(2, 16, 1)];
        let r = train(&mut model, &chips, &TrainConfig { epochs: 2, ..TrainConfig::default() }, |_| {}).unwrap();
        let stats = ChannelStats {
            channels: vec![Channel::VvPre, Channel::VvPost],
            mean: vec![0.5, -1.0],
            std: vec![2.0, 0.25],
        };
        let ck = Checkpoint {
            model: model.clone(),
            stats: stats.clone(),
            state: Some(r.state.clone()),
        };
        let p = tmp.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.stats, stats);
        let st = back.state.unwrap();
        assert_eq!(st.adam.step_count(), 2);
        assert_eq!(st.adam.moments(), r.state.adam.moments());
        assert_eq!(st.epochs_done, 2);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Corrupt(_))));
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Corrupt(_))));
    }
}
