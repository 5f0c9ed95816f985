//! Interferogram formation, windowed coherence and block multilooking on
//! co-registered complex rasters. No phase unwrapping is performed.

use num_complex::Complex;

use crate::cube_store::{vars, Datacube, Dim, GeoTransform, RasterVar};
use crate::error::{Error, Result};
use crate::raster::Grid;

pub const DEFAULT_WINDOW: (usize, usize) = (5, 5);
pub const DEFAULT_LOOKS: (usize, usize) = (1, 5);

/// Complex raster stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexRaster {
    pub re: Grid<f32>,
    pub im: Grid<f32>,
}

impl ComplexRaster {
    pub fn new(re: Grid<f32>, im: Grid<f32>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::DimMismatch(format!(
                "real {:?} vs imaginary {:?}",
                re.shape(),
                im.shape()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<f32>) -> Self {
        let mut re = Grid::filled(rows, cols, 0.0);
        let mut im = Grid::filled(rows, cols, 0.0);
        for r in 0..rows {
            for c in 0..cols {
                let z = f(r, c);
                re.set(r, c, z.re);
                im.set(r, c, z.im);
            }
        }
        Self { re, im }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.re.shape()
    }

    pub fn get(&self, r: usize, c: usize) -> Complex<f32> {
        Complex::new(self.re.get(r, c), self.im.get(r, c))
    }

    pub fn scale(&self, k: Complex<f32>) -> Self {
        let (rows, cols) = self.shape();
        Self::from_fn(rows, cols, |r, c| self.get(r, c) * k)
    }

    pub fn phase(&self) -> Grid<f32> {
        let (rows, cols) = self.shape();
        Grid::from_fn(rows, cols, |r, c| self.get(r, c).arg())
    }

    pub fn magnitude(&self) -> Grid<f32> {
        let (rows, cols) = self.shape();
        Grid::from_fn(rows, cols, |r, c| self.get(r, c).norm())
    }
}

fn check_pair(a: &ComplexRaster, b: &ComplexRaster) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch(format!(
            "complex rasters {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `s1 · conj(s2)` per pixel.
pub fn form_interferogram(s1: &ComplexRaster, s2: &ComplexRaster) -> Result<ComplexRaster> {
    check_pair(s1, s2)?;
    let (rows, cols) = s1.shape();
    Ok(ComplexRaster::from_fn(rows, cols, |r, c| s1.get(r, c) * s2.get(r, c).conj()))
}

/// Sum over a centred `wy × wx` window with edge replication, via an
/// integral image of the padded field.
fn box_sum(field: &[f64], rows: usize, cols: usize, wy: usize, wx: usize) -> Vec<f64> {
    let (hy, hx) = (wy / 2, wx / 2);
    let (pr, pc) = (rows + 2 * hy, cols + 2 * hx);
    let mut integral = vec![0.0f64; (pr + 1) * (pc + 1)];
    for i in 0..pr {
        let r = (i as isize - hy as isize).clamp(0, rows as isize - 1) as usize;
        let mut acc = 0.0;
        for j in 0..pc {
            let c = (j as isize - hx as isize).clamp(0, cols as isize - 1) as usize;
            acc += field[r * cols + c];
            integral[(i + 1) * (pc + 1) + j + 1] = integral[i * (pc + 1) + j + 1] + acc;
        }
    }
    let at = |i: usize, j: usize| integral[i * (pc + 1) + j];
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = at(r + wy, c + wx) - at(r, c + wx) - at(r + wy, c) + at(r, c);
        }
    }
    out
}

/// Windowed coherence magnitude in `[0, 1]`; zero where either window has
/// no energy.
pub fn estimate_coherence(s1: &ComplexRaster, s2: &ComplexRaster, window: (usize, usize)) -> Result<Grid<f32>> {
    check_pair(s1, s2)?;
    let (wy, wx) = window;
    if wy % 2 == 0 || wx % 2 == 0 {
        return Err(Error::InvalidSpec(format!("coherence window {wy}x{wx} must be odd")));
    }
    let (rows, cols) = s1.shape();
    let n = rows * cols;
    let (mut xr, mut xi, mut e1, mut e2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let a = Complex::new(s1.re.data()[i] as f64, s1.im.data()[i] as f64);
        let b = Complex::new(s2.re.data()[i] as f64, s2.im.data()[i] as f64);
        let x = a * b.conj();
        xr[i] = x.re;
        xi[i] = x.im;
        e1[i] = a.norm_sqr();
        e2[i] = b.norm_sqr();
    }
    let [xr, xi, e1, e2] = [xr, xi, e1, e2].map(|f| box_sum(&f, rows, cols, wy, wx));
    let data = (0..n)
        .map(|i| {
            let denom = e1[i] * e2[i];
            if e1[i] <= 0.0 || e2[i] <= 0.0 || denom <= 0.0 {
                0.0
            } else {
                (xr[i].hypot(xi[i]) / denom.sqrt()).clamp(0.0, 1.0) as f32
            }
        })
        .collect();
    Ok(Grid::new(rows, cols, data))
}

/// Non-overlapping `(az, rg)` block mean; partial trailing blocks are dropped.
pub fn multilook(x: &Grid<f32>, looks: (usize, usize)) -> Result<Grid<f32>> {
    let (az, rg) = looks;
    if az == 0 || rg == 0 {
        return Err(Error::InvalidSpec(format!("looks ({az}, {rg}) must be >= 1")));
    }
    let (rows, cols) = (x.rows() / az, x.cols() / rg);
    let inv = 1.0 / (az * rg) as f64;
    Ok(Grid::from_fn(rows, cols, |r, c| {
        let mut s = 0.0f64;
        for i in 0..az {
            for &v in &x.row(r * az + i)[c * rg..(c + 1) * rg] {
                s += v as f64;
            }
        }
        (s * inv) as f32
    }))
}

pub fn multilook_complex(x: &ComplexRaster, looks: (usize, usize)) -> Result<ComplexRaster> {
    ComplexRaster::new(multilook(&x.re, looks)?, multilook(&x.im, looks)?)
}

/// Per-pair products for consecutive acquisitions.
#[derive(Clone, Debug)]
pub struct PairProducts {
    pub interferograms: Vec<ComplexRaster>,
    pub coherence: Vec<Grid<f32>>,
}

/// Interferogram and coherence for each consecutive pair `(t, t+1)`,
/// multilooked after estimation.
pub fn consecutive_pairs(slcs: &[ComplexRaster], window: (usize, usize), looks: (usize, usize)) -> Result<PairProducts> {
    if slcs.len() < 2 {
        return Err(Error::TooFew(format!("{} acquisitions; need at least 2", slcs.len())));
    }
    let mut out = PairProducts {
        interferograms: Vec::new(),
        coherence: Vec::new(),
    };
    for w in slcs.windows(2) {
        out.interferograms
            .push(multilook_complex(&form_interferogram(&w[0], &w[1])?, looks)?);
        out.coherence
            .push(multilook(&estimate_coherence(&w[0], &w[1], window)?, looks)?);
    }
    Ok(out)
}

/// Reads the `slc_re`/`slc_im` stack of `src` and writes interferograms and
/// coherence along `timepair` into a new cube at `out` on the multilooked grid.
pub fn process_cube(
    src: &Datacube,
    out: &std::path::Path,
    window: (usize, usize),
    looks: (usize, usize),
) -> Result<Datacube> {
    let t = src
        .dim_len(Dim::Timestep)
        .ok_or_else(|| Error::InvalidSpec("cube has no timestep dimension".into()))?;
    let slcs = (0..t)
        .map(|i| {
            ComplexRaster::new(
                src.read_grid_f32(vars::SLC_RE, Some(i))?,
                src.read_grid_f32(vars::SLC_IM, Some(i))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let products = consecutive_pairs(&slcs, window, looks)?;
    let (rows, cols) = products.coherence[0].shape();
    if rows == 0 || cols == 0 {
        return Err(Error::TooSmall(format!("multilooked grid is {rows}x{cols}")));
    }
    let gt = src.geotransform();
    let gt = GeoTransform::new(
        gt.origin_x,
        gt.origin_y,
        gt.pixel_w * looks.1 as f64,
        gt.pixel_h * looks.0 as f64,
    )?;
    let mut cube = Datacube::create(out, &[(Dim::Timepair, t - 1), (Dim::Y, rows), (Dim::X, cols)], gt)?;
    for (k, v) in src.attrs() {
        if k != crate::cube_store::attrs::GEOTRANSFORM && k != crate::cube_store::attrs::DIMS {
            cube.set_attr(k.clone(), v.clone())?;
        }
    }
    let re: Vec<_> = products.interferograms.iter().map(|z| z.re.clone()).collect();
    let im: Vec<_> = products.interferograms.iter().map(|z| z.im.clone()).collect();
    cube.write_var(&RasterVar::stack_f32(vars::IFG_RE, Dim::Timepair, &re)?)?;
    cube.write_var(&RasterVar::stack_f32(vars::IFG_IM, Dim::Timepair, &im)?)?;
    cube.write_var(&RasterVar::stack_f32(vars::COHERENCE, Dim::Timepair, &products.coherence)?)?;
    Ok(cube)
}
