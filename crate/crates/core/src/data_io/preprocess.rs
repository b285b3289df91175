//! Intensity normalization, random cropping and isotropic resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Affine map `y = scale·x + offset` taking `[min, max]` onto `[−1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Degenerate(format!("min-max scaling needs max > min, got [{min}, {max}]")));
        }
        Ok(MinMax { min, max })
    }

    /// Joint range of several volumes.
    pub fn fit(vols: &[&Volume]) -> Result<Self> {
        let (lo, hi) = vols
            .iter()
            .map(|v| v.min_max())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (lo, hi)| (a.min(lo), b.max(hi)));
        Self::new(lo, hi)
    }

    pub fn scale(&self) -> f64 {
        2.0 / (self.max - self.min)
    }

    pub fn offset(&self) -> f64 {
        -(self.max + self.min) / (self.max - self.min)
    }

    pub fn apply(&self, vol: &Volume) -> Volume {
        let (s, o) = (self.scale(), self.offset());
        vol.map(|x| s * x + o)
    }

    pub fn restore(&self, vol: &Volume) -> Volume {
        let (s, o) = (self.scale(), self.offset());
        vol.map(|y| (y - o) / s)
    }
}

/// Scale a volume by its own range onto `[−1, 1]`.
pub fn normalize_minmax(vol: &Volume) -> Result<(Volume, MinMax)> {
    let (lo, hi) = vol.min_max();
    let mm = MinMax::new(lo, hi)?;
    // clamp away the last-ulp overshoot at the endpoints
    Ok((mm.apply(vol).map(|y| y.clamp(-1.0, 1.0)), mm))
}

/// Corner of the `call`-th crop of edge `size` drawn for `seed`.
pub fn crop_corner(shape: [usize; 3], size: usize, seed: u64, call: u64) -> Result<[usize; 3]> {
    if size == 0 || shape.iter().any(|&n| size > n) {
        return Err(Error::Shape(format!("crop size {size} does not fit volume {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call);
    Ok(shape.map(|n| rng.gen_range(0..=n - size)))
}

/// Uniformly placed cube of edge `size`; `size` must divide by `2^levels`.
pub fn random_crop(vol: &Volume, size: usize, levels: u32, seed: u64, call: u64) -> Result<Volume> {
    if !size.is_multiple_of(1 << levels) {
        return Err(Error::Shape(format!("crop size {size} is not divisible by 2^{levels}")));
    }
    let c = crop_corner(vol.shape, size, seed, call)?;
    vol.crop(c, [size; 3])
}

/// Trilinear resampling onto an isotropic grid of `spacing` covering the
/// same physical extent, centred on the same point.
pub fn resample_isotropic(vol: &Volume, spacing: f64) -> Result<Volume> {
    if !(spacing > 0.0) {
        return Err(Error::Parameter(format!("target spacing must be positive, got {spacing}")));
    }
    let shape = vol
        .shape
        .map(|n| ((n as f64 * vol.spacing / spacing).round() as usize).max(1));
    let centre = [0, 1, 2].map(|k| vol.origin[k] + 0.5 * (vol.shape[k] as f64 - 1.0) * vol.spacing);
    let origin = [0, 1, 2].map(|k| centre[k] - 0.5 * (shape[k] as f64 - 1.0) * spacing);
    let mut out = Volume {
        shape,
        spacing,
        origin,
        data: vec![0.0; shape.iter().product()],
    };
    // edge-clamped sampling in source index space
    let sample = |f: [f64; 3]| -> f64 {
        let mut idx = [[0usize; 2]; 3];
        let mut t = [0.0; 3];
        for k in 0..3 {
            let n = vol.shape[k];
            let c = f[k].clamp(0.0, (n - 1) as f64);
            let i0 = (c.floor() as usize).min(n.saturating_sub(2));
            idx[k] = [i0, (i0 + 1).min(n - 1)];
            t[k] = c - i0 as f64;
        }
        let mut acc = 0.0;
        for (a, wz) in [(0, 1.0 - t[0]), (1, t[0])] {
            for (b, wy) in [(0, 1.0 - t[1]), (1, t[1])] {
                for (c, wx) in [(0, 1.0 - t[2]), (1, t[2])] {
                    let w = wz * wy * wx;
                    if w != 0.0 {
                        acc += w * vol.get(idx[0][a], idx[1][b], idx[2][c]);
                    }
                }
            }
        }
        acc
    };
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = out.position(z, y, x);
                let f = [0, 1, 2].map(|k| (p[k] - vol.origin[k]) / vol.spacing);
                let i = out.index(z, y, x);
                out.data[i] = sample(f);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn vol_from(vals: Vec<f64>) -> Volume {
        let n = vals.len();
        Volume::from_data([1, 1, n], 1.0, vals).unwrap()
    }

    #[test]
    fn unit_range_is_identity() {
        let v = vol_from(vec![-1.0, 0.1, 0.37, 1.0]);
        let (n, mm) = normalize_minmax(&v).unwrap();
        assert_eq!(n.data, v.data);
        assert_eq!((mm.scale(), mm.offset()), (1.0, 0.0));
    }

    #[test]
    fn endpoints_map_exactly() {
        let v = vol_from(vec![2.0, 3.5, 4.0]);
        let (n, mm) = normalize_minmax(&v).unwrap();
        assert_eq!(n.data[0], -1.0);
        assert_eq!(n.data[2], 1.0);
        assert_eq!(n.data[1], 0.5);
        let back = mm.restore(&n);
        assert!(back.data.iter().zip(&v.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_degenerate_input() {
        let v = vol_from((0..50).map(|i| (i as f64 * 0.731).sin() * 3.0 + 0.2).collect());
        let (n, mm) = normalize_minmax(&v).unwrap();
        assert!(n.data.iter().all(|x| (-1.0..=1.0).contains(x)));
        let back = mm.restore(&n);
        assert!(back.data.iter().zip(&v.data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(normalize_minmax(&vol_from(vec![0.4; 5])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn full_size_crop_is_the_volume() {
        let v = Volume::from_data([4, 4, 4], 1.0, (0..64).map(f64::from).collect()).unwrap();
        assert_eq!(random_crop(&v, 4, 2, 9, 0).unwrap(), v);
        assert!(random_crop(&v, 3, 1, 9, 0).is_err());
        assert!(random_crop(&v, 8, 0, 9, 0).is_err());
    }

    #[test]
    fn crops_are_deterministic_per_seed_and_call() {
        let a = crop_corner([20, 20, 20], 8, 5, 3).unwrap();
        assert_eq!(a, crop_corner([20, 20, 20], 8, 5, 3).unwrap());
        let distinct = (0..20).map(|c| crop_corner([20, 20, 20], 8, 5, c).unwrap()).collect::<std::collections::HashSet<_>>();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn crop_positions_are_uniform() {
        let cells = 11; // 16 − 6 + 1 positions per axis
        let mut counts = vec![0.0; cells];
        let draws = 10_000;
        for call in 0..draws {
            counts[crop_corner([16, 16, 16], 6, 77, call).unwrap()[0]] += 1.0;
        }
        let e = draws as f64 / cells as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        let p = ChiSquared::new((cells - 1) as f64).unwrap().sf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn resampling_keeps_linear_fields() {
        let mut v = Volume::zeros([6, 6, 6], 1.0);
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let p = v.position(z, y, x);
                    let i = v.index(z, y, x);
                    v.data[i] = 0.5 * p[0] - p[1] + 2.0 * p[2];
                }
            }
        }
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.shape, [12; 3]);
        for z in 1..11 {
            for y in 1..11 {
                for x in 1..11 {
                    let p = r.position(z, y, x);
                    let expect = 0.5 * p[0] - p[1] + 2.0 * p[2];
                    assert!((r.get(z, y, x) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
