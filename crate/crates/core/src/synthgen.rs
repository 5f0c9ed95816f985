//! Synthetic datacubes with known landslide masks.
//!
//! Terrain is a sum of random low-frequency cosines; landslides are smooth
//! noise blobs restricted to steep ground; backscatter is a per-pixel mean
//! times unit-mean gamma speckle, dimmed inside the mask after the event.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube_store::{attrs, vars, Datacube, Dim, GeoTransform, RasterVar};
use crate::error::{Error, Result};
use crate::preprocess::log_stabilize;
use crate::raster::Grid;
use crate::terrain::derive_terrain;

pub const PIXEL_SIZE: f64 = 10.0;
pub const DEFAULT_AMPLITUDE: f64 = 100.0;
const DEM_MODES: usize = 10;
const MIN_WAVELENGTH_PX: f64 = 48.0;
const MAX_WAVELENGTH_PX: f64 = 320.0;
const BLOB_PASSES: usize = 3;
const TEXTURE_RADIUS: usize = 4;

// Sub-seed offsets so each field has an independent stream.
const STREAM_DEM: u64 = 1;
const STREAM_BLOBS: u64 = 2;
const STREAM_MEAN: u64 = 3;
const STREAM_SPECKLE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: (usize, usize),
    pub n_pre: usize,
    pub n_post: usize,
    pub seed: u64,
    /// Degrees; landslides only occur on steeper ground.
    pub slope_threshold: f64,
    /// Linear-power factor applied to landslide pixels after the event.
    pub landslide_drop: f64,
    pub speckle_looks: u32,
    /// Desired positive-pixel fraction.
    pub target_prevalence: f64,
    /// Box-blur radius (pixels) of the field that shapes landslide patches;
    /// larger values give larger, rounder patches.
    pub blob_radius: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: (1024, 1024),
            n_pre: 4,
            n_post: 4,
            seed: 0,
            slope_threshold: 40.0,
            landslide_drop: 0.5,
            speckle_looks: 4,
            target_prevalence: 0.10,
            blob_radius: 2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.shape.0 < 16 || self.shape.1 < 16 {
            return bad(format!("shape {:?} below 16x16", self.shape));
        }
        if self.n_pre == 0 || self.n_post == 0 {
            return bad("n_pre and n_post must be >= 1".into());
        }
        if !(self.landslide_drop > 0.0 && self.landslide_drop < 1.0) {
            return bad(format!("landslide_drop {} not in (0, 1)", self.landslide_drop));
        }
        if self.speckle_looks == 0 {
            return bad("speckle_looks must be >= 1".into());
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return bad(format!("target_prevalence {} not in (0, 1)", self.target_prevalence));
        }
        if !self.slope_threshold.is_finite() || self.slope_threshold < 0.0 {
            return bad(format!("slope_threshold {}", self.slope_threshold));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Smooth random terrain with standard deviation of roughly `amplitude / √2`.
pub fn gen_dem_with(shape: (usize, usize), seed: u64, amplitude: f64) -> Result<Grid<f32>> {
    let (rows, cols) = shape;
    if rows < 16 || cols < 16 {
        return Err(Error::TooSmall(format!("DEM {rows}x{cols} below 16x16")));
    }
    let mut rng = stream(seed, STREAM_DEM);
    let per_mode = amplitude / (DEM_MODES as f64).sqrt();
    let modes: Vec<(f64, f64, f64)> = (0..DEM_MODES)
        .map(|_| {
            let wl = MIN_WAVELENGTH_PX * (MAX_WAVELENGTH_PX / MIN_WAVELENGTH_PX).powf(rng.random::<f64>());
            let theta = rng.random::<f64>() * 2.0 * PI;
            let k = 2.0 * PI / wl;
            (k * theta.cos(), k * theta.sin(), rng.random::<f64>() * 2.0 * PI)
        })
        .collect();
    Ok(Grid::from_fn(rows, cols, |r, c| {
        let z: f64 = modes
            .iter()
            .map(|&(kx, ky, ph)| (kx * c as f64 + ky * r as f64 + ph).cos())
            .sum();
        (per_mode * z) as f32
    }))
}

pub fn gen_dem(shape: (usize, usize), seed: u64) -> Result<Grid<f32>> {
    gen_dem_with(shape, seed, DEFAULT_AMPLITUDE)
}

/// Separable box blur with edge replication.
fn box_blur(g: &Grid<f32>, radius: usize) -> Grid<f32> {
    let (rows, cols) = g.shape();
    let norm = 1.0 / (2 * radius + 1) as f32;
    let rad = radius as isize;
    let h = Grid::from_fn(rows, cols, |r, c| {
        (-rad..=rad).map(|d| g.get_clamped(r as isize, c as isize + d)).sum::<f32>() * norm
    });
    Grid::from_fn(rows, cols, |r, c| {
        (-rad..=rad).map(|d| h.get_clamped(r as isize + d, c as isize)).sum::<f32>() * norm
    })
}

fn smooth_noise(shape: (usize, usize), radius: usize, rng: &mut ChaCha8Rng) -> Grid<f32> {
    let mut g = Grid::from_fn(shape.0, shape.1, |_, _| rng.sample::<f32, _>(StandardNormal));
    for _ in 0..BLOB_PASSES {
        g = box_blur(&g, radius);
    }
    g
}

/// Steep pixels whose blob field is within the top fraction needed to reach
/// the target prevalence (all steep pixels when too few exist).
fn place_landslides(slope: &Grid<f32>, blobs: &Grid<f32>, threshold: f64, target: f64) -> Grid<u8> {
    let steep: Vec<f32> = slope
        .data()
        .iter()
        .zip(blobs.data())
        .filter(|(s, _)| **s as f64 > threshold)
        .map(|(_, b)| *b)
        .collect();
    let want = (target * slope.len() as f64).round() as usize;
    let cut = if steep.is_empty() || want >= steep.len() {
        f32::NEG_INFINITY
    } else {
        let mut sorted = steep;
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        sorted[want.max(1) - 1]
    };
    let (rows, cols) = slope.shape();
    Grid::from_fn(rows, cols, |r, c| {
        (slope.get(r, c) as f64 > threshold && blobs.get(r, c) >= cut) as u8
    })
}

/// Generated layers prior to writing.
#[derive(Clone, Debug)]
pub struct Scene {
    pub dem: Grid<f32>,
    pub slope: Grid<f32>,
    pub aspect: Grid<f32>,
    pub curvature: Grid<f32>,
    pub mask: Grid<u8>,
    pub vv: Vec<Grid<f32>>,
    pub vh: Vec<Grid<f32>>,
}

impl Scene {
    pub fn prevalence(&self) -> f64 {
        self.mask.data().iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }
}

pub fn gen_layers(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (rows, cols) = spec.shape;
    let dem = gen_dem(spec.shape, spec.seed)?;
    let terrain = derive_terrain(&dem, PIXEL_SIZE)?;
    let blobs = smooth_noise(spec.shape, spec.blob_radius, &mut stream(spec.seed, STREAM_BLOBS));
    let mask = place_landslides(&terrain.slope, &blobs, spec.slope_threshold, spec.target_prevalence);
    if mask.data().iter().all(|&m| m == 0) {
        return Err(Error::DegenerateScene(format!(
            "no pixels steeper than {}°",
            spec.slope_threshold
        )));
    }

    // Mean backscatter: smooth land-cover texture plus a mild terrain term.
    let mut rng = stream(spec.seed, STREAM_MEAN);
    let tex_vv = smooth_noise(spec.shape, TEXTURE_RADIUS, &mut rng);
    let tex_vh = smooth_noise(spec.shape, TEXTURE_RADIUS, &mut rng);
    let slope_term = terrain.slope.map(|s| (s.to_radians().sin() * 0.5) as f32);
    let mean = |tex: &Grid<f32>, base: f32| {
        Grid::from_fn(rows, cols, |r, c| base * (1.5 * tex.get(r, c) + slope_term.get(r, c)).exp())
    };
    let mu_vv = mean(&tex_vv, 0.1);
    let mu_vh = mean(&tex_vh, 0.02);

    let looks = spec.speckle_looks as f64;
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut rng = stream(spec.seed, STREAM_SPECKLE);
    let drop = spec.landslide_drop as f32;
    let mut series = |mu: &Grid<f32>| -> Vec<Grid<f32>> {
        (0..spec.n_pre + spec.n_post)
            .map(|t| {
                let post = t >= spec.n_pre;
                Grid::from_fn(rows, cols, |r, c| {
                    let m = if post && mask.get(r, c) == 1 { drop } else { 1.0 };
                    mu.get(r, c) * m * gamma.sample(&mut rng) as f32
                })
            })
            .collect()
    };
    let vv = series(&mu_vv);
    let vh = series(&mu_vh);
    Ok(Scene {
        dem,
        slope: terrain.slope,
        aspect: terrain.aspect,
        curvature: terrain.curvature,
        mask,
        vv,
        vh,
    })
}

/// Generates a scene and writes it as a cube at `path`.
pub fn gen_scene(spec: &SceneSpec, path: &Path) -> Result<Datacube> {
    let scene = gen_layers(spec)?;
    write_scene(spec, &scene, path)
}

pub fn write_scene(spec: &SceneSpec, scene: &Scene, path: &Path) -> Result<Datacube> {
    let (rows, cols) = spec.shape;
    let gt = GeoTransform::new(0.0, rows as f64 * PIXEL_SIZE, PIXEL_SIZE, -PIXEL_SIZE)?;
    let mut cube = Datacube::create(
        path,
        &[(Dim::Timestep, spec.n_pre + spec.n_post), (Dim::Y, rows), (Dim::X, cols)],
        gt,
    )?;
    cube.set_attr(attrs::EVENT_INDEX, spec.n_pre.to_string())?;
    cube.set_attr(attrs::CRS, "LOCAL")?;
    cube.set_attr("synthetic_seed", spec.seed.to_string())?;
    cube.write_var(&RasterVar::stack_f32(vars::VV, Dim::Timestep, &scene.vv)?)?;
    cube.write_var(&RasterVar::stack_f32(vars::VH, Dim::Timestep, &scene.vh)?)?;
    cube.write_var(&RasterVar::grid_f32(vars::DEM, &scene.dem))?;
    cube.write_var(&RasterVar::grid_f32(vars::SLOPE, &scene.slope))?;
    cube.write_var(&RasterVar::grid_f32(vars::ASPECT, &scene.aspect))?;
    cube.write_var(&RasterVar::grid_f32(vars::CURVATURE, &scene.curvature))?;
    cube.write_var(&RasterVar::grid_u8(vars::LABEL, &scene.mask))?;
    Ok(cube)
}

/// Per-pixel change score: minus the post/pre log-ratio of the `k`
/// timesteps either side of the event, averaged over both polarisations.
/// Higher means more likely a landslide.
pub fn log_ratio_score(vv: &[Grid<f32>], vh: &[Grid<f32>], event: usize, k: usize) -> Result<Grid<f32>> {
    if k == 0 || event < k || event + k > vv.len() || vv.len() != vh.len() {
        return Err(Error::InvalidSpec(format!(
            "k={k} around event {event} with {} timesteps",
            vv.len()
        )));
    }
    let (rows, cols) = vv[0].shape();
    let mut acc = Grid::filled(rows, cols, 0.0f32);
    for (series, sign_scale) in [(vv, 1.0f32), (vh, 1.0)] {
        for (t, g) in series.iter().enumerate().take(event + k).skip(event - k) {
            let sign = if t < event { 1.0 } else { -1.0 } * sign_scale / (2.0 * k as f32);
            for (a, v) in acc.data_mut().iter_mut().zip(log_stabilize(g).data()) {
                *a += sign * v;
            }
        }
    }
    Ok(acc)
}
