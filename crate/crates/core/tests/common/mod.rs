//! Helpers shared by the integration targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slidecube::cube_store::{Datacube, Dim, GeoTransform, RasterVar};
use slidecube::segmodel::{ModelConfig, UNet};
use slidecube::zarr::ArrayData;
use slidecube_nn::gradcheck::{analytic_grads, max_rel_diff, numeric_grads, random};
use slidecube_nn::{Graph, Scalar, Tensor, Var};

/// sha256 of `vv[0]` as little-endian f32, printed by `fixtures/make_fixture.py`.
pub const FIXTURE_VV0_SHA256: &str = "0d49f2c993713fc38e3318b0b3c4ff41a91ccfc45afe3f4c38e705ea0e28391d";

pub fn fixture_cube() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini_cube")
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Opens the numpy-written fixture and checks every variable against the
/// closed forms the generator used.
pub fn check_fixture() -> Result<(), String> {
    let cube = Datacube::open(fixture_cube()).map_err(|e| e.to_string())?;
    let err = |e: slidecube::Error| e.to_string();
    if cube.dims() != [(Dim::Timestep, 4), (Dim::Y, 12), (Dim::X, 10)] {
        return Err(format!("dims {:?}", cube.dims()));
    }
    if cube.attr("event_index") != Some("2") {
        return Err(format!("event_index {:?}", cube.attr("event_index")));
    }
    let gt = cube.geotransform();
    if (gt.origin_x, gt.origin_y, gt.pixel_w, gt.pixel_h) != (500000.0, 4800000.0, 10.0, -10.0) {
        return Err(format!("geotransform {gt:?}"));
    }
    for t in 0..4 {
        let vv = cube.read_grid_f32("vv", Some(t)).map_err(err)?;
        let vh = cube.read_grid_f32("vh", Some(t)).map_err(err)?;
        for y in 0..12 {
            for x in 0..10 {
                let want = (0.05 + 0.01 * t as f64 + 0.002 * y as f64 + 0.0003 * x as f64) as f32;
                if vv.get(y, x) != want || vh.get(y, x) != want * 0.2 {
                    return Err(format!("vv/vh mismatch at ({t},{y},{x})"));
                }
            }
        }
        if t == 0 {
            let bytes: Vec<u8> = vv.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let got = sha256_hex(&bytes);
            if got != FIXTURE_VV0_SHA256 {
                return Err(format!("vv[0] sha256 {got}"));
            }
        }
    }
    let dem = cube.read_grid_f32("dem", None).map_err(err)?;
    let label = cube.read_grid_u8("label").map_err(err)?;
    for y in 0..12 {
        for x in 0..10 {
            if dem.get(y, x) != (100.0 + 3.0 * y as f64 - 2.0 * x as f64) as f32 {
                return Err(format!("dem mismatch at ({y},{x})"));
            }
            // chunk (1, 1) of the label was never written and reads as fill
            let want = if y >= 6 && x >= 5 { 255 } else { ((y + x) % 5 == 0) as u8 };
            if label.get(y, x) != want {
                return Err(format!("label mismatch at ({y},{x})"));
            }
        }
    }
    let win = cube.read_f32("vv", Some(&[1..3, 4..11, 3..9])).map_err(err)?;
    if win.len() != 2 * 7 * 6 || win[0] != (0.05 + 0.01 + 0.008 + 0.0009f64) as f32 {
        return Err("windowed read of vv".into());
    }
    Ok(())
}

/// Writes one random 2-D or 3-D variable (extents ≤ 64, random chunking,
/// arbitrary finite f32 bit patterns or mask bytes) into a fresh cube under
/// `dir` and reads it back.
pub fn random_var_roundtrip(seed: u64, dir: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_lead = rng.random_bool(0.6);
    let mut dims = Vec::new();
    if with_lead {
        dims.push((if rng.random_bool(0.5) { Dim::Timestep } else { Dim::Timepair }, rng.random_range(1..=64)));
    }
    dims.push((Dim::Y, rng.random_range(1..=64)));
    dims.push((Dim::X, rng.random_range(1..=64)));
    let shape: Vec<usize> = dims.iter().map(|d| d.1).collect();
    let chunks: Vec<usize> = shape.iter().map(|&s| rng.random_range(1..=s)).collect();
    let n: usize = shape.iter().product();
    let data = if rng.random_bool(0.5) {
        ArrayData::F32(
            (0..n)
                .map(|_| Some(f32::from_bits(rng.random())).filter(|v| v.is_finite()).unwrap_or(-1.5))
                .collect(),
        )
    } else {
        // masks hold 0, 1 or the 255 fill
        ArrayData::U8((0..n).map(|_| [0, 1, 255][rng.random_range(0..3)]).collect())
    };
    let path = dir.join(format!("cube{seed}"));
    let mut cube = Datacube::create(&path, &dims, GeoTransform::default()).map_err(|e| e.to_string())?;
    let var = RasterVar::new("v", dims.iter().map(|d| d.0).collect(), chunks.clone(), data.clone());
    cube.write_var(&var).map_err(|e| e.to_string())?;
    let back = Datacube::open(&path).map_err(|e| e.to_string())?;
    let read = back.read_var("v", None).map_err(|e| e.to_string())?;
    let same_bits = match (&data, &read) {
        (ArrayData::F32(a), ArrayData::F32(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        (a, b) => a == b,
    };
    std::fs::remove_dir_all(&path).ok();
    if same_bits {
        Ok(())
    } else {
        Err(format!("shape {shape:?} chunks {chunks:?}: data differs"))
    }
}

/// Average precision by rescanning every pixel at every distinct threshold.
pub fn brute_force_auprc(scores: &[f32], labels: &[u8]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let (mut tp, mut predicted) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                predicted += 1;
                tp += (l != 0) as usize;
            }
        }
        let recall = tp as f64 / total_pos;
        ap += (recall - prev_recall) * (tp as f64 / predicted as f64);
        prev_recall = recall;
    }
    ap.clamp(0.0, 1.0)
}

/// Depth-2 model with a randomised classifier (the zero-initialised one
/// would block every gradient below it) plus a small input and labels.
fn gradcheck_setup<T: Scalar>(seed: u64) -> (UNet<T>, Tensor<T>, Vec<u8>) {
    let cfg = ModelConfig {
        in_channels: 2,
        base_width: 2,
        depth: 2,
    };
    let mut model = UNet::<T>::new(cfg, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let last = model.params().len() - 2;
    for p in &mut model.params_mut()[last..] {
        *p = random(&mut rng, p.shape(), 0.5);
    }
    // scales away from 1 so the normalisation affine is exercised too
    for (name, p) in model.names().to_vec().iter().zip(model.params_mut()) {
        if name.ends_with("norm_scale") || name.ends_with("norm_shift") {
            let base = if name.ends_with("scale") { 1.0 } else { 0.0 };
            let noise = random::<T>(&mut rng, p.shape(), 0.3);
            *p = Tensor::from_fn(p.shape(), |i| T::from_f64_lossy(base) + noise.data()[i]);
        }
    }
    let x = random(&mut rng, &[1, 2, 8, 8], 1.0);
    let labels = (0..64).map(|_| rng.random_range(0..2u8)).collect();
    (model, x, labels)
}

fn model_loss<'a, T: Scalar>(model: &'a UNet<T>, labels: &[u8]) -> impl Fn(&mut Graph<T>, &[Var]) -> Var + 'a {
    let labels = labels.to_vec();
    move |g: &mut Graph<T>, v: &[Var]| {
        let logits = model.forward_with(g, v[0], &v[1..]).expect("forward");
        g.cross_entropy(logits, &labels).expect("loss")
    }
}

fn leaves<T: Scalar>(model: &UNet<T>, x: &Tensor<T>) -> Vec<Tensor<T>> {
    std::iter::once(x.clone()).chain(model.params().iter().cloned()).collect()
}

/// Maximum relative error of the full depth-2 model's reverse-mode gradients
/// (input and every parameter) against f64 central differences, for an
/// f64 model and for an f32 model evaluated at the same point.
pub fn model_gradcheck(seed: u64) -> (f64, f64) {
    let (model64, x64, labels) = gradcheck_setup::<f64>(seed);
    let inputs64 = leaves(&model64, &x64);
    let build64 = model_loss(&model64, &labels);
    let numeric = numeric_grads(&inputs64, &build64, 1e-5);

    let analytic64 = analytic_grads(&inputs64, &build64).expect("backward");
    let err64 = analytic64
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_diff(a.data(), n, 1e-4))
        .fold(0.0, f64::max);

    // the f32 model holds the f64 values rounded once; compare against
    // differences of that same rounded point in f64
    let mut model32 = UNet::<f32>::new(*model64.config(), seed).expect("valid config");
    for (dst, src) in model32.params_mut().iter_mut().zip(model64.params()) {
        *dst = Tensor::from_fn(src.shape(), |i| src.data()[i] as f32);
    }
    let x32 = Tensor::from_fn(x64.shape(), |i| x64.data()[i] as f32);
    let rounded: Vec<Tensor<f64>> = leaves(&model32, &x32)
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] as f64))
        .collect();
    let numeric_rounded = numeric_grads(&rounded, &build64, 1e-5);
    let build32 = model_loss(&model32, &labels);
    let analytic32 = analytic_grads(&leaves(&model32, &x32), &build32).expect("backward");
    let err32 = analytic32
        .iter()
        .zip(&numeric_rounded)
        .map(|(a, n)| {
            let a: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
            max_rel_diff(&a, n, 1e-3)
        })
        .fold(0.0, f64::max);
    (err64, err32)
}
