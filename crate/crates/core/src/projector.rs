//! Ray-driven cone-beam forward projection.
//!
//! Each detector pixel integrates the volume along the segment from the
//! source to the pixel centre. The segment is clipped to the support of the
//! trilinear interpolant (voxel centres extended by one voxel, zero outside)
//! and sampled at midpoints of equal sub-steps no longer than half a voxel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, ViewSubset};
use crate::volume::Volume;

/// Line integrals for a stack of views, stored view-major `(view, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub geometry: ConeBeamGeometry,
    pub data: Vec<f64>,
}

impl ProjectionSet {
    pub fn new(geometry: ConeBeamGeometry, data: Vec<f64>) -> Result<Self> {
        let expect = geometry.n_views() * geometry.detector_rows * geometry.detector_cols;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "{} projection values, geometry needs {expect}",
                data.len()
            )));
        }
        Ok(ProjectionSet { geometry, data })
    }

    pub fn n_views(&self) -> usize {
        self.geometry.n_views()
    }

    pub fn view_len(&self) -> usize {
        self.geometry.detector_rows * self.geometry.detector_cols
    }

    pub fn view(&self, i: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Keep only the views a subset selects from this (parent) projection set.
    pub fn select(&self, subset: &ViewSubset) -> Result<ProjectionSet> {
        if subset.parent != self.geometry {
            return Err(Error::Contract("view subset was built from another geometry".into()));
        }
        let data = subset
            .indices
            .iter()
            .flat_map(|&i| self.view(i).iter().copied())
            .collect();
        ProjectionSet::new(subset.geometry(), data)
    }
}

/// Trilinear sample with zero extension, in continuous index coordinates.
#[inline]
fn trilinear(vol: &Volume, fz: f64, fy: f64, fx: f64) -> f64 {
    let [d, h, w] = vol.shape;
    // callers stay above −1 (clipped rays), so truncation after a shift is a floor
    let (z0, y0, x0) = ((fz + 1.0) as isize - 1, (fy + 1.0) as isize - 1, (fx + 1.0) as isize - 1);
    let (tz, ty, tx) = (fz - z0 as f64, fy - y0 as f64, fx - x0 as f64);
    if z0 >= 0 && y0 >= 0 && x0 >= 0 && z0 + 1 < d as isize && y0 + 1 < h as isize && x0 + 1 < w as isize {
        let i = (z0 as usize * h + y0 as usize) * w + x0 as usize;
        let v = &vol.data;
        let (s_y, s_z) = (w, h * w);
        let c00 = v[i] + tx * (v[i + 1] - v[i]);
        let c01 = v[i + s_y] + tx * (v[i + s_y + 1] - v[i + s_y]);
        let c10 = v[i + s_z] + tx * (v[i + s_z + 1] - v[i + s_z]);
        let c11 = v[i + s_z + s_y] + tx * (v[i + s_z + s_y + 1] - v[i + s_z + s_y]);
        let c0 = c00 + ty * (c01 - c00);
        let c1 = c10 + ty * (c11 - c10);
        return c0 + tz * (c1 - c0);
    }
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        let z = z0 + dz;
        if z < 0 || z >= d as isize || wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            let y = y0 + dy;
            if y < 0 || y >= h as isize || wy == 0.0 {
                continue;
            }
            let row = (z as usize * h + y as usize) * w;
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let x = x0 + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                acc += wz * wy * wx * vol.data[row + x as usize];
            }
        }
    }
    acc
}

/// Integral of the volume along `start → end` (world `(z, y, x)`, mm).
fn ray_integral(vol: &Volume, start: [f64; 3], end: [f64; 3]) -> f64 {
    let s = vol.spacing;
    // index-space endpoints
    let a = [0, 1, 2].map(|k| (start[k] - vol.origin[k]) / s);
    let b = [0, 1, 2].map(|k| (end[k] - vol.origin[k]) / s);
    let dir = [0, 1, 2].map(|k| b[k] - a[k]);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..3 {
        let (lo, hi) = (-1.0, vol.shape[k] as f64);
        if dir[k].abs() < 1e-15 {
            if a[k] <= lo || a[k] >= hi {
                return 0.0;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - a[k]) / dir[k], (hi - a[k]) / dir[k]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t1 <= t0 {
        return 0.0;
    }
    let length_mm = (0..3)
        .map(|k| (end[k] - start[k]).powi(2))
        .sum::<f64>()
        .sqrt();
    let seg_mm = (t1 - t0) * length_mm;
    let n = (seg_mm / (0.5 * s)).ceil().max(1.0) as usize;
    let dt = (t1 - t0) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * dt;
        acc += trilinear(vol, a[0] + t * dir[0], a[1] + t * dir[1], a[2] + t * dir[2]);
    }
    acc * seg_mm / n as f64
}

/// Source position and detector frame at gantry angle `beta`.
/// Returns `(source, detector_centre, u_axis)`, each `(z, y, x)`.
pub(crate) fn view_frame(geom: &ConeBeamGeometry, beta: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (sb, cb) = beta.sin_cos();
    let sid = geom.source_to_isocenter;
    let back = geom.source_to_detector - sid;
    (
        [0.0, sid * sb, sid * cb],
        [0.0, -back * sb, -back * cb],
        [0.0, cb, -sb],
    )
}

/// Line integrals of `vol` for every view of `geom`.
pub fn forward_project(vol: &Volume, geom: &ConeBeamGeometry) -> Result<ProjectionSet> {
    if !vol.is_finite() {
        return Err(Error::Parameter("volume holds non-finite values".into()));
    }
    let (rows, cols) = (geom.detector_rows, geom.detector_cols);
    let views: Vec<Vec<f64>> = geom
        .angles
        .par_iter()
        .map(|&beta| {
            let (src, centre, u_axis) = view_frame(geom, beta);
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let v = (r as f64 - 0.5 * (rows as f64 - 1.0)) * geom.pixel_pitch_v;
                for c in 0..cols {
                    let u = (c as f64 - 0.5 * (cols as f64 - 1.0)) * geom.pixel_pitch_u;
                    let pixel = [
                        centre[0] + v,
                        centre[1] + u * u_axis[1],
                        centre[2] + u * u_axis[2],
                    ];
                    out[r * cols + c] = ray_integral(vol, src, pixel);
                }
            }
            out
        })
        .collect();
    ProjectionSet::new(geom.clone(), views.concat())
}

/// Forward projection onto the views a subset keeps.
pub fn forward_project_subset(vol: &Volume, subset: &ViewSubset) -> Result<ProjectionSet> {
    forward_project(vol, &subset.geometry())
}

/// Photon-counting noise on line integrals: `p' = −ln(max(Poisson(I₀e^{−p}), 1)/I₀)`,
/// clamped below at 0. Deterministic for a given seed.
pub fn add_poisson_noise(proj: &ProjectionSet, incident_photons: f64, seed: u64) -> Result<ProjectionSet> {
    if !(incident_photons > 0.0) || !incident_photons.is_finite() {
        return Err(Error::Parameter(format!(
            "incident photon count must be positive, got {incident_photons}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clamped = 0usize;
    let mut data = Vec::with_capacity(proj.data.len());
    for &p in &proj.data {
        let mean = incident_photons * (-p).exp();
        let count = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::Parameter(format!("poisson rate {mean}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        let count = if count < 1.0 {
            clamped += 1;
            1.0
        } else {
            count
        };
        data.push((-(count / incident_photons).ln()).max(0.0));
    }
    if clamped > 0 {
        log::warn!("{clamped} detector readings had zero transmitted photons; clamped to 1");
    }
    ProjectionSet::new(proj.geometry.clone(), data)
}
