//! PSNR and slice-wise SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR value; identical inputs have no finite PSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Psnr {
    Finite(f64),
    Identical,
}

impl Psnr {
    /// Decibels, `+∞` for identical inputs.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }

    pub fn is_identical(self) -> bool {
        matches!(self, Psnr::Identical)
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Identical => f.write_str("inf"),
        }
    }
}

/// How the dynamic range entering PSNR and SSIM is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DataRange {
    /// `max(ref) − min(ref)`.
    Auto,
    Fixed(f64),
}

impl DataRange {
    fn resolve(self, reference: &Volume) -> Result<f64> {
        let r = match self {
            DataRange::Fixed(r) => r,
            DataRange::Auto => {
                let (lo, hi) = reference.min_max();
                hi - lo
            }
        };
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Parameter(format!("data range must be positive, got {r}")));
        }
        Ok(r)
    }
}

fn same_shape(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("volumes differ in shape: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn psnr_of(reference: &[f64], test: &[f64], range: f64) -> Psnr {
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Finite(10.0 * (range * range / mse).log10())
    }
}

pub fn psnr(reference: &Volume, test: &Volume, range: DataRange) -> Result<Psnr> {
    same_shape(reference, test)?;
    Ok(psnr_of(&reference.data, &test.data, range.resolve(reference)?))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = 0.5 * (size as f64 - 1.0);
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Valid-mode separable filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions of one `h × w` slice.
pub fn ssim_slice(reference: &[f64], test: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mx = filter_valid(reference, h, w, &taps);
    let my = filter_valid(test, h, w, &taps);
    let mxx = filter_valid(&prod(reference, reference), h, w, &taps);
    let myy = filter_valid(&prod(test, test), h, w, &taps);
    let mxy = filter_valid(&prod(reference, test), h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-axial-slice SSIM values.
pub fn ssim_slices(reference: &Volume, test: &Volume, range: DataRange) -> Result<Vec<f64>> {
    same_shape(reference, test)?;
    let r = range.resolve(reference)?;
    let [d, h, w] = reference.shape;
    let m = h * w;
    (0..d)
        .map(|z| ssim_slice(&reference.data[z * m..(z + 1) * m], &test.data[z * m..(z + 1) * m], h, w, r))
        .collect()
}

pub fn ssim(reference: &Volume, test: &Volume, range: DataRange) -> Result<f64> {
    let s = ssim_slices(reference, test, range)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetric {
    pub slice: usize,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
    pub data_range: f64,
    pub slices: Vec<SliceMetric>,
}

impl MetricReport {
    pub fn compute(reference: &Volume, test: &Volume, range: DataRange) -> Result<Self> {
        same_shape(reference, test)?;
        let r = range.resolve(reference)?;
        let ssims = ssim_slices(reference, test, DataRange::Fixed(r))?;
        let m = reference.shape[1] * reference.shape[2];
        let slices = ssims
            .iter()
            .enumerate()
            .map(|(z, &s)| SliceMetric {
                slice: z,
                psnr: psnr_of(&reference.data[z * m..(z + 1) * m], &test.data[z * m..(z + 1) * m], r),
                ssim: s,
            })
            .collect();
        Ok(MetricReport {
            psnr: psnr_of(&reference.data, &test.data, r),
            ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
            data_range: r,
            slices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Volume::from_data(shape, 1.0, data).unwrap()
    }

    #[test]
    fn identical_volumes() {
        let v = ramp_volume([2, 12, 12]);
        assert_eq!(psnr(&v, &v, DataRange::Auto).unwrap(), Psnr::Identical);
        assert_eq!(ssim(&v, &v, DataRange::Auto).unwrap(), 1.0);
    }

    #[test]
    fn uniform_offset_is_twenty_db() {
        let v = ramp_volume([2, 12, 12]);
        let p = psnr(&v, &v.map(|x| x + 0.1), DataRange::Fixed(1.0)).unwrap().db();
        assert!((p - 20.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn halving_noise_gains_six_db() {
        let v = ramp_volume([8, 32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f64> = Normal::new(0.0, 0.05).unwrap().sample_iter(&mut rng).take(v.len()).collect();
        let with = |k: f64| {
            let mut t = v.clone();
            t.data.iter_mut().zip(&noise).for_each(|(x, n)| *x += k * n);
            psnr(&v, &t, DataRange::Fixed(1.0)).unwrap().db()
        };
        let gain = with(0.5) - with(1.0);
        assert!((gain - 20.0 * 2f64.log10()).abs() < 0.1, "{gain}");
        // deterministic scaling makes the gain exact here
        assert!((gain - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn negated_structure_has_negative_ssim() {
        // checkerboard: local means stay near zero so only structure flips
        let data = (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 0.8 } else { -0.8 }).collect();
        let v = Volume::from_data([1, 16, 16], 1.0, data).unwrap();
        assert!(ssim(&v, &v.map(|x| -x), DataRange::Fixed(2.0)).unwrap() < 0.0);
    }

    #[test]
    fn single_window_matches_hand_formula() {
        let n = SSIM_WINDOW * SSIM_WINDOW;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7) % 13) as f64 / 12.0).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 5) % 11) as f64 / 10.0).collect();
        let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let w: Vec<f64> = (0..n).map(|i| g[i / SSIM_WINDOW] * g[i % SSIM_WINDOW]).collect();
        let mean = |a: &[f64]| a.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>();
        let (ux, uy) = (mean(&x), mean(&y));
        let vx: f64 = x.iter().zip(&w).map(|(v, w)| w * (v - ux).powi(2)).sum();
        let vy: f64 = y.iter().zip(&w).map(|(v, w)| w * (v - uy).powi(2)).sum();
        let cxy: f64 = (0..n).map(|i| w[i] * (x[i] - ux) * (y[i] - uy)).sum();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let oracle = ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        let got = ssim_slice(&x, &y, SSIM_WINDOW, SSIM_WINDOW, 1.0).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn undersized_slices_are_rejected() {
        let v = ramp_volume([3, 10, 20]);
        assert!(matches!(ssim(&v, &v, DataRange::Auto), Err(Error::Parameter(_))));
    }

    #[test]
    fn report_breaks_down_slices() {
        let v = ramp_volume([3, 12, 12]);
        let t = v.map(|x| 0.9 * x);
        let r = MetricReport::compute(&v, &t, DataRange::Auto).unwrap();
        assert_eq!(r.slices.len(), 3);
        assert!((r.data_range - 1.0).abs() < 1e-12);
        assert!((r.ssim - r.slices.iter().map(|s| s.ssim).sum::<f64>() / 3.0).abs() < 1e-15);
    }
}
