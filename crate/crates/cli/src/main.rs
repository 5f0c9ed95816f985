//! `cube`: command-line front end for the datacube → chips → model pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use slidecube::chipper::{self, prepare_dataset, CHIP_SIZE};
use slidecube::cube_store::{vars, Datacube, RasterVar};
use slidecube::experiment::{self, AblationConfig, DEFAULT_TEST_FRACTION};
use slidecube::ingest::{fetch_verify, rasterize_mask, read_polygons};
use slidecube::insar;
use slidecube::metrics::{evaluate_chips, write_curve_csv};
use slidecube::pgm;
use slidecube::preprocess::{ChannelSet, ChannelStats, InputConfig};
use slidecube::segmodel::{predict_chips, train, Checkpoint, ModelConfig, TrainConfig, UNet};
use slidecube::synthgen::{gen_scene, SceneSpec};
use slidecube::terrain::derive_terrain;
use slidecube::zarr::{self, ArrayData, ArrayMeta, DType};
use slidecube::Error;

#[derive(Parser)]
#[command(name = "cube", version, about = "Landslide segmentation on SAR datacubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download a file and verify its SHA-256 (cached copies are reused).
    Fetch {
        #[arg(long)]
        url: String,
        #[arg(long)]
        sha256: String,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cube with known landslide labels.
    Synth {
        #[arg(long, value_parser = parse_pair, default_value = "1024,1024")]
        shape: (usize, usize),
        #[arg(long, default_value_t = 4)]
        pre: usize,
        #[arg(long, default_value_t = 4)]
        post: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        slope_threshold: Option<f64>,
        #[arg(long)]
        drop: Option<f64>,
        #[arg(long)]
        looks: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive slope, aspect and curvature from the cube's DEM.
    Terrain {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long, default_value = vars::DEM)]
        dem_var: String,
        /// Ground distance per pixel; defaults to the geotransform pixel width.
        #[arg(long)]
        pixel_size: Option<f64>,
    },
    /// Rasterize label polygons (GeoJSON) into the cube's `label` variable.
    Labels {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        polygons: PathBuf,
    },
    /// Interferograms and coherence for consecutive SLC pairs.
    Insar {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long, default_value = "consecutive")]
        pairs: String,
        #[arg(long, value_parser = parse_pair, default_value = "5,5")]
        window: (usize, usize),
        #[arg(long, value_parser = parse_pair, default_value = "1,5")]
        looks: (usize, usize),
        /// Output cube on the multilooked grid.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile, filter, split and standardise chips.
    Chips {
        #[arg(long)]
        cube: PathBuf,
        /// JSON with `channel_set`, `k` and optionally `chip_size`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        set: Option<ChannelSet>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on `DIR/train`.
    Train {
        #[arg(long)]
        chips: PathBuf,
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score chips; writes 16-bit PGMs and a `scores` array.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        chips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision-recall curve and AUPRC over pooled test pixels.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        chips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the channel-set × timestep ablation grid.
    Ablate {
        #[arg(long)]
        cube: PathBuf,
        /// JSON mirroring every flag; flags given explicitly override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sets: Option<Vec<ChannelSet>>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Number of seeds (0..N).
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        time_limit: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected A,B, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ChipsFile {
    channel_set: Option<ChannelSet>,
    k: Option<usize>,
    chip_size: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    base_width: Option<usize>,
    depth: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelSection,
    train: Option<TrainConfig>,
}

/// Accepts either a chip-set directory or a dataset root holding `test/`.
fn chip_set_dir(dir: &Path, default_split: &str) -> PathBuf {
    if zarr::is_group(dir) {
        dir.to_path_buf()
    } else {
        dir.join(default_split)
    }
}

fn check_channels(ckpt: &Checkpoint, channels: &[slidecube::preprocess::Channel]) -> Result<()> {
    if ckpt.stats.channels != channels {
        bail!(
            "checkpoint channels {:?} differ from chip channels {:?}",
            ckpt.stats.channels,
            channels
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch { url, sha256, out } => {
            let name = url
                .rsplit('/')
                .next()
                .filter(|s| !s.is_empty())
                .context("URL has no file name")?;
            fs::create_dir_all(&out)?;
            let path = fetch_verify(&url, &sha256, &out.join(name))?;
            println!("{}", path.display());
        }
        Command::Synth {
            shape,
            pre,
            post,
            seed,
            slope_threshold,
            drop,
            looks,
            out,
        } => {
            let d = SceneSpec::default();
            let spec = SceneSpec {
                shape,
                n_pre: pre,
                n_post: post,
                seed,
                slope_threshold: slope_threshold.unwrap_or(d.slope_threshold),
                landslide_drop: drop.unwrap_or(d.landslide_drop),
                speckle_looks: looks.unwrap_or(d.speckle_looks),
                ..d
            };
            gen_scene(&spec, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Terrain {
            cube,
            dem_var,
            pixel_size,
        } => {
            let mut cube = Datacube::open(&cube)?;
            let px = pixel_size.unwrap_or(cube.geotransform().pixel_w.abs());
            let dem = cube.read_grid_f32(&dem_var, None)?;
            let t = derive_terrain(&dem, px)?;
            cube.write_var(&RasterVar::grid_f32(vars::SLOPE, &t.slope))?;
            cube.write_var(&RasterVar::grid_f32(vars::ASPECT, &t.aspect))?;
            cube.write_var(&RasterVar::grid_f32(vars::CURVATURE, &t.curvature))?;
        }
        Command::Labels { cube, polygons } => {
            let mut cube = Datacube::open(&cube)?;
            let polys = read_polygons(&polygons)?;
            let mask = rasterize_mask(&polys, &cube.geotransform(), cube.spatial_shape())?;
            let n = mask.data().iter().filter(|&&m| m == 1).count();
            cube.write_var(&RasterVar::grid_u8(vars::LABEL, &mask))?;
            println!("{} polygons, {n} positive pixels", polys.len());
        }
        Command::Insar {
            cube,
            pairs,
            window,
            looks,
            out,
        } => {
            if pairs != "consecutive" {
                bail!("only --pairs consecutive is supported");
            }
            let src = Datacube::open(&cube)?;
            let c = insar::process_cube(&src, &out, window, looks)?;
            println!("wrote {} ({:?})", out.display(), c.dims());
        }
        Command::Chips {
            cube,
            config,
            set,
            k,
            test_fraction,
            seed,
            out,
        } => {
            let file: ChipsFile = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let set = set.or(file.channel_set).unwrap_or(ChannelSet::SarDem);
            let k = k.or(file.k).unwrap_or(4);
            let size = file.chip_size.unwrap_or(CHIP_SIZE);
            let cube = Datacube::open(&cube)?;
            let input = InputConfig::for_cube(&cube, set, k)?;
            let ds = prepare_dataset(&cube, &input, size, test_fraction, seed)?;
            chipper::write_dataset(&out, &ds)?;
            println!(
                "{} tiles, {} retained ({} train / {} test), prevalence {:.4}",
                ds.tiled,
                ds.train.len() + ds.test.len(),
                ds.train.len(),
                ds.test.len(),
                ds.prevalence()
            );
        }
        Command::Train { chips, config, out } => {
            let file: TrainFile = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let (channels, train_chips) = chipper::read_chip_set(&chip_set_dir(&chips, "train"))?;
            let stats_path = chips.join("stats.json");
            let stats = if stats_path.exists() {
                ChannelStats::load(&stats_path)?
            } else {
                ChannelStats::identity(channels.clone())
            };
            let mut mcfg = ModelConfig::new(channels.len());
            mcfg.base_width = file.model.base_width.unwrap_or(mcfg.base_width);
            mcfg.depth = file.model.depth.unwrap_or(mcfg.depth);
            let tcfg = file.train.unwrap_or_default();
            let mut model = UNet::<f32>::new(mcfg, tcfg.seed)?;
            eprintln!("{} parameters, {} training chips", model.param_count(), train_chips.len());
            let result = train(&mut model, &train_chips, &tcfg, |e| {
                eprintln!("epoch {:>3}  loss {:.6}  lr {:.0e}  {:.1}s", e.epoch, e.loss, e.lr, e.seconds)
            });
            let state = result.as_ref().ok().map(|r| r.state.clone());
            Checkpoint { model, stats, state }.save(&out)?;
            if let Err(e @ Error::Diverged { .. }) = result {
                bail!("{e}; last good parameters saved to {}", out.display());
            }
            result?;
        }
        Command::Predict { ckpt, chips, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let (channels, set) = chipper::read_chip_set(&chip_set_dir(&chips, "test"))?;
            check_channels(&ckpt, &channels)?;
            let scores = predict_chips(&ckpt.model, &set, 8)?;
            let size = set.first().map_or(0, |c| c.size);
            zarr::write_group(&out, &Default::default())?;
            for (i, s) in scores.iter().enumerate() {
                pgm::write_pgm16(&out.join(format!("chip{i:03}_score.pgm")), size, size, &pgm::score_pixels(s))?;
            }
            zarr::write_array(
                &out.join("scores"),
                &ArrayMeta {
                    shape: vec![set.len(), size, size],
                    chunks: vec![1, size, size],
                    dtype: DType::F32,
                    dim_names: ["chip", "y", "x"].map(String::from).to_vec(),
                },
                &ArrayData::F32(scores.concat()),
            )?;
            println!("scored {} chips into {}", set.len(), out.display());
        }
        Command::Eval { ckpt, chips, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let (channels, set) = chipper::read_chip_set(&chip_set_dir(&chips, "test"))?;
            check_channels(&ckpt, &channels)?;
            let scores = predict_chips(&ckpt.model, &set, 8)?;
            let masks: Vec<&[u8]> = set.iter().map(|c| c.mask.as_slice()).collect();
            let curve = evaluate_chips(&scores, &masks)?;
            write_curve_csv(&curve, &out)?;
            println!("auprc {:.4}  prevalence {:.4}", curve.auprc, curve.prevalence);
        }
        Command::Ablate {
            cube,
            config,
            sets,
            ks,
            seeds,
            epochs,
            width,
            depth,
            jobs,
            time_limit,
            out,
        } => {
            let mut cfg: AblationConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            if let Some(v) = sets {
                cfg.sets = v;
            }
            if let Some(v) = ks {
                cfg.ks = v;
            }
            if let Some(n) = seeds {
                cfg.seeds = (0..n).collect();
            }
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.base_width = width.unwrap_or(cfg.base_width);
            cfg.depth = depth.unwrap_or(cfg.depth);
            cfg.jobs = jobs.unwrap_or(cfg.jobs);
            cfg.time_limit_secs = time_limit.or(cfg.time_limit_secs);
            let cube = Datacube::open(&cube)?;
            let result = experiment::run_ablation(&cube, &cfg, &out, &|r| {
                eprintln!(
                    "{:<7} k={} seed={}  auprc {}  ({:.1} min)",
                    r.channel_set, r.k, r.seed, r.auprc, r.train_minutes
                )
            })?;
            for s in experiment::summarize(&result.rows) {
                println!(
                    "{:<7} k={}  auprc {:.4} ± {:.4}  (n={})",
                    s.channel_set, s.k, s.mean_auprc, s.std_auprc, s.runs
                );
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
